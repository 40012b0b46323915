//! Outer-loop training: combined fast-weight loss, Adam, checkpointed fit loop.

use std::fmt;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, init_backbone, BackboneConfig, BackboneParams, SegmentMemory};
use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{FwlError, Result};
use crate::layer::{
    fast_backward, fast_forward, per_position_grads, slow_backward, slow_forward, update_stream_state, Decays,
    FastMask, GradOrder, HeadParams, StepSizes, Stream, StreamState,
};
use crate::numerics::rel_err;
use crate::params::ParamSet;

/// Backbone, head, step sizes and decays: every trainable quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneParams,
    pub head: HeadParams,
    pub steps: StepSizes,
    pub decays: Decays,
}

impl Model {
    pub fn new(config: &BackboneConfig, d_hidden: usize, mask: FastMask) -> Result<Self> {
        if d_hidden == 0 {
            return Err(FwlError::config("d_hidden", "must be positive"));
        }
        let backbone = init_backbone(config)?;
        let head = HeadParams::init(config.d_model, d_hidden, config.vocab_size, config.seed);
        Ok(Model {
            backbone,
            head,
            steps: StepSizes::new(mask),
            decays: Decays::default(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale_all(0.0);
        z
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn vocab_size(&self) -> usize {
        self.backbone.config.vocab_size
    }

    /// Flat ranges of (backbone, head, α, γ).
    pub fn layout(&self) -> [Range<usize>; 4] {
        let nb = self.backbone.num_params();
        let nh = self.head.num_params();
        [0..nb, nb..nb + nh, nb + nh..nb + nh + 8, nb + nh + 8..nb + nh + 16]
    }
}

impl ParamSet for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.backbone.visit(f);
        self.head.visit(f);
        self.steps.visit(f);
        self.decays.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.backbone.visit_mut(f);
        self.head.visit_mut(f);
        self.steps.visit_mut(f);
        self.decays.visit_mut(f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Objective `Σ L'_t` with second-order gradients into everything.
    #[default]
    Full,
    /// Objective `Σ L_t`; the fast pass is never run.
    SlowOnly,
    /// Like `Full` but the backbone is frozen.
    FwlFinetune,
}

impl FromStr for Mode {
    type Err = FwlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "slow-only" => Ok(Mode::SlowOnly),
            "fwl-finetune" => Ok(Mode::FwlFinetune),
            _ => Err(FwlError::config(
                "mode",
                format!("expected full, slow-only or fwl-finetune, got `{s}`"),
            )),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::SlowOnly => "slow-only",
            Mode::FwlFinetune => "fwl-finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Length of one segment.
    pub seq_len: usize,
    /// Segments per training sample; more than one threads memory and stream state.
    pub segments: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub mode: Mode,
    pub mask: FastMask,
    pub chunk_size: usize,
    pub seed: u64,
    /// Treat per-position gradients as constants in the outer gradient.
    pub first_order: bool,
    /// Learning rate for α and γ; defaults to `lr`.
    pub alpha_lr: Option<f64>,
    pub eval_every: usize,
    /// Dev windows used per evaluation; 0 means all.
    pub eval_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 8,
            seq_len: 32,
            segments: 1,
            steps: 1000,
            warmup_steps: 100,
            clip_norm: 1.0,
            mode: Mode::Full,
            mask: FastMask::ALL,
            chunk_size: crate::linear_attention::DEFAULT_CHUNK,
            seed: 0,
            first_order: false,
            alpha_lr: None,
            eval_every: 100,
            eval_windows: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("eps", self.eps), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FwlError::config(name, "must be positive"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(FwlError::config(name, "must be in [0, 1)"));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(FwlError::config("weight_decay", "must be non-negative"));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("segments", self.segments),
            ("chunk_size", self.chunk_size),
        ] {
            if v == 0 {
                return Err(FwlError::config(name, "must be positive"));
            }
        }
        if let Some(a) = self.alpha_lr {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(FwlError::config("alpha_lr", "must be non-negative"));
            }
        }
        Ok(())
    }

    /// Tokens per training sample including the final target.
    pub fn window(&self) -> usize {
        self.seq_len * self.segments + 1
    }

    pub fn grad_order(&self) -> GradOrder {
        if self.first_order {
            GradOrder::First
        } else {
            GradOrder::Second
        }
    }
}

/// Memory and stream state a segment was processed with.
#[derive(Clone, Debug)]
pub struct SegmentContext {
    pub memory: SegmentMemory,
    pub state: Option<StreamState>,
}

/// Sum of per-position losses of one sample; accumulates `scale ×` its
/// gradient into `grads` when given.
///
/// `frozen` replays previously recorded contexts instead of threading new
/// ones, which is how the stop-gradient on memory and stream state is
/// checked against finite differences.
fn sample_pass(
    model: &Model,
    tokens: &[usize],
    cfg: &TrainConfig,
    scale: f64,
    mut grads: Option<&mut Model>,
    frozen: Option<&[SegmentContext]>,
) -> Result<(f64, Vec<SegmentContext>)> {
    if tokens.len() < 2 {
        return Err(FwlError::Input("a sample needs at least two tokens".into()));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    let n_seg = inputs.len().div_ceil(cfg.seq_len);
    let streaming = n_seg > 1 && cfg.mode != Mode::SlowOnly;
    let mut ctx = SegmentContext {
        memory: SegmentMemory::empty(model.config()),
        state: streaming.then(|| StreamState::empty(&model.head, model.steps.mask)),
    };
    let mut used = Vec::with_capacity(n_seg);
    let mut total = 0.0;
    for s in 0..n_seg {
        if let Some(f) = frozen {
            ctx = f[s].clone();
        }
        let lo = s * cfg.seq_len;
        let hi = (lo + cfg.seq_len).min(inputs.len());
        let (h, cache, new_mem) = backbone::forward(&model.backbone, &inputs[lo..hi], &ctx.memory)?;
        let ys = &targets[lo..hi];
        let (tape, slow_losses) = slow_forward(&model.head, &h, ys)?;
        let weights = vec![scale; hi - lo];
        let need_grads = cfg.mode != Mode::SlowOnly || grads.is_some();
        let pg = if need_grads {
            Some(per_position_grads(&model.head, &tape, ys)?)
        } else {
            None
        };
        let dh = if cfg.mode == Mode::SlowOnly {
            total += slow_losses.iter().sum::<f64>();
            match grads.as_deref_mut() {
                Some(g) => {
                    let (d_head, dh) = slow_backward(&model.head, &tape, pg.as_ref().expect("grads"), &weights);
                    g.head.axpy_flat(1.0, &d_head.flatten());
                    Some(dh)
                }
                None => None,
            }
        } else {
            let pg = pg.as_ref().expect("grads");
            let stream = ctx.state.as_ref().map(|state| Stream {
                state,
                decays: &model.decays,
            });
            let fast = fast_forward(&model.head, &model.steps, &tape, pg, stream, cfg.chunk_size)?;
            total += fast.losses.iter().sum::<f64>();
            match grads.as_deref_mut() {
                Some(g) => {
                    let b = fast_backward(
                        &model.head,
                        &model.steps,
                        &tape,
                        pg,
                        stream,
                        &fast,
                        &weights,
                        cfg.grad_order(),
                    )?;
                    g.head.axpy_flat(1.0, &b.d_head.flatten());
                    for i in 0..8 {
                        g.steps.alpha[i] += b.d_alpha[i].unwrap_or(0.0);
                        g.decays.logit[i] += b.d_decay_logit[i].unwrap_or(0.0);
                    }
                    Some(b.d_h)
                }
                None => None,
            }
        };
        if let (Some(g), Some(dh)) = (grads.as_deref_mut(), dh) {
            if cfg.mode != Mode::FwlFinetune {
                backbone::backward(&model.backbone, &cache, &dh, &mut g.backbone);
            }
        }
        let next_state = match (&ctx.state, &pg) {
            (Some(st), Some(pg)) => Some(update_stream_state(st, pg, &tape, &model.decays)),
            _ => None,
        };
        used.push(ctx);
        ctx = SegmentContext {
            memory: new_mem,
            state: next_state,
        };
    }
    Ok((total, used))
}

fn predicted(batch: &[Vec<usize>]) -> usize {
    batch.iter().map(|s| s.len().saturating_sub(1)).sum()
}

/// Mean per-token loss of the configured objective over a batch.
pub fn batch_loss(model: &Model, batch: &[Vec<usize>], cfg: &TrainConfig) -> Result<f64> {
    Ok(batch_loss_with(model, batch, cfg, None)?.0)
}

fn batch_loss_with(
    model: &Model,
    batch: &[Vec<usize>],
    cfg: &TrainConfig,
    frozen: Option<&[Vec<SegmentContext>]>,
) -> Result<(f64, Vec<Vec<SegmentContext>>)> {
    let n = predicted(batch) as f64;
    let mut total = 0.0;
    let mut ctxs = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let (l, c) = sample_pass(model, s, cfg, 1.0, None, frozen.map(|f| f[i].as_slice()))?;
        total += l;
        ctxs.push(c);
    }
    Ok((total / n, ctxs))
}

/// Mean loss and its gradient with respect to every model quantity.
pub fn compute_gradients(model: &Model, batch: &[Vec<usize>], cfg: &TrainConfig) -> Result<(f64, Model)> {
    if batch.is_empty() {
        return Err(FwlError::Input("empty batch".into()));
    }
    let n = predicted(batch) as f64;
    let mut grads = model.zeros_like();
    let mut total = 0.0;
    for s in batch {
        total += sample_pass(model, s, cfg, 1.0 / n, Some(&mut grads), None)?.0;
    }
    Ok((total / n, grads))
}

/// Adam moments over the flattened model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// A slice of the flat layout sharing learning-rate scale and decay.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub range: Range<usize>,
    /// Multiplies the base learning rate; 0 freezes the group.
    pub lr_scale: f64,
    pub weight_decay: bool,
}

pub fn param_groups(model: &Model, cfg: &TrainConfig) -> Vec<ParamGroup> {
    let [bb, head, alpha, decay] = model.layout();
    let frozen_backbone = cfg.mode == Mode::FwlFinetune;
    let meta = cfg.alpha_lr.map_or(1.0, |a| a / cfg.lr);
    vec![
        ParamGroup {
            range: bb,
            lr_scale: if frozen_backbone { 0.0 } else { 1.0 },
            weight_decay: true,
        },
        ParamGroup {
            range: head,
            lr_scale: 1.0,
            weight_decay: true,
        },
        ParamGroup {
            range: alpha,
            lr_scale: meta,
            weight_decay: false,
        },
        ParamGroup {
            range: decay,
            lr_scale: meta,
            weight_decay: false,
        },
    ]
}

/// Learning rate after linear warmup, for the step about to be taken.
pub fn scheduled_lr(cfg: &TrainConfig, t: u64) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.lr
    } else {
        cfg.lr * ((t + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    }
}

/// One Adam step with bias correction, global-norm clipping and decoupled
/// weight decay. Returns the gradient norm before clipping.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
    groups: &[ParamGroup],
) -> f64 {
    let norm = groups
        .iter()
        .filter(|g| g.lr_scale != 0.0)
        .flat_map(|g| grads[g.range.clone()].iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    let lr = scheduled_lr(cfg, state.t);
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for g in groups {
        if g.lr_scale == 0.0 {
            continue;
        }
        let step = lr * g.lr_scale;
        for i in g.range.clone() {
            let gi = grads[i] * clip;
            state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * gi;
            state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = state.m[i] / bc1;
            let vhat = state.v[i] / bc2;
            if g.weight_decay && cfg.weight_decay > 0.0 {
                params[i] -= step * cfg.weight_decay * params[i];
            }
            params[i] -= step * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub ppl: f64,
    pub grad_norm: f64,
    pub alphas: [f64; 8],
    pub wall_ms: f64,
}

/// Computes gradients on `batch` and applies one Adam step.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamState,
    batch: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let start = Instant::now();
    let step = opt.t;
    let (loss, grads) = compute_gradients(model, batch, cfg)?;
    let flat_g = grads.flatten();
    if !loss.is_finite() || flat_g.iter().any(|g| !g.is_finite()) {
        return Err(FwlError::Numerical(format!(
            "step {step}: loss {loss}, {} non-finite gradient entries, alphas {:?}",
            flat_g.iter().filter(|g| !g.is_finite()).count(),
            model.steps.alpha
        )));
    }
    let mut flat = model.flatten();
    let groups = param_groups(model, cfg);
    let grad_norm = adam_update(&mut flat, &flat_g, opt, cfg, &groups);
    model.unflatten(&flat);
    Ok(StepMetrics {
        step,
        loss,
        ppl: loss.exp(),
        grad_norm,
        alphas: model.steps.alpha,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Max relative error between the analytic gradient and central differences
/// along `n_directions` random directions over the trainable parameters.
///
/// Memory and stream state are replayed from the unperturbed pass, so any
/// gradient leaking through them would show up as a mismatch.
pub fn grad_check(model: &Model, batch: &[Vec<usize>], cfg: &TrainConfig, n_directions: usize, seed: u64) -> Result<f64> {
    let (_, grads) = compute_gradients(model, batch, cfg)?;
    let (_, ctxs) = batch_loss_with(model, batch, cfg, None)?;
    let g = grads.flatten();
    let x = model.flatten();
    let groups = param_groups(model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..n_directions {
        let mut dir = vec![0.0; x.len()];
        for grp in &groups {
            if grp.lr_scale == 0.0 {
                continue;
            }
            for i in grp.range.clone() {
                dir[i] = StandardNormal.sample(&mut rng);
            }
        }
        if cfg.mode == Mode::SlowOnly {
            let [_, _, alpha, decay] = model.layout();
            dir[alpha.start..decay.end].iter_mut().for_each(|d| *d = 0.0);
        }
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);
        let eval = |s: f64| -> Result<f64> {
            let mut m = model.clone();
            let shifted: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
            m.unflatten(&shifted);
            Ok(batch_loss_with(&m, batch, cfg, Some(&ctxs))?.0)
        };
        let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        worst = worst.max(rel_err(an, fd));
    }
    Ok(worst)
}

/// Non-overlapping window start offsets into a token stream.
pub fn window_starts(stream_len: usize, window: usize) -> Vec<usize> {
    if stream_len < window {
        return Vec::new();
    }
    (0..=(stream_len - window)).step_by(window.saturating_sub(1).max(1)).collect()
}

/// Where `fit` writes artifacts. Any field may be absent.
#[derive(Clone, Debug, Default)]
pub struct FitOutput {
    pub dir: Option<PathBuf>,
}

impl FitOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        FitOutput { dir: Some(dir.into()) }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub best_dev: Option<f64>,
    pub metrics: Vec<StepMetrics>,
    pub dev_history: Vec<(u64, f64)>,
}

/// Mean dev loss of the configured objective over up to `limit` windows.
pub fn evaluate(model: &Model, corpus: &Corpus, cfg: &TrainConfig, limit: usize) -> Result<f64> {
    let stream = corpus.stream();
    let w = cfg.window();
    let mut starts = window_starts(stream.len(), w);
    if starts.is_empty() {
        return Err(FwlError::config("seq_len", "dev corpus is shorter than one window"));
    }
    if limit > 0 {
        starts.truncate(limit);
    }
    let batch: Vec<Vec<usize>> = starts.iter().map(|&o| stream[o..o + w].to_vec()).collect();
    batch_loss(model, &batch, cfg)
}

fn append_jsonl(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| FwlError::io(path, e))?;
    writeln!(f, "{value}").map_err(|e| FwlError::io(path, e))
}

/// Trains from `start` (fresh or resumed) until `start.train.steps`.
///
/// Batches are a deterministic function of (seed, step), so a resumed run
/// sees exactly the batches the unbroken run would have.
pub fn fit(start: Checkpoint, train: &Corpus, dev: Option<&Corpus>, out: &FitOutput) -> Result<FitOutcome> {
    let cfg = start.train.clone();
    cfg.validate()?;
    if train.tokenizer.vocab_size() != start.model.vocab_size() {
        return Err(FwlError::config(
            "vocab_size",
            format!(
                "corpus vocabulary has {} symbols, model expects {}",
                train.tokenizer.vocab_size(),
                start.model.vocab_size()
            ),
        ));
    }
    if cfg.seq_len > start.model.config().max_seq_len {
        return Err(FwlError::config("seq_len", "exceeds the backbone's max_seq_len"));
    }
    let stream = train.stream();
    let w = cfg.window();
    let starts = window_starts(stream.len(), w);
    if starts.is_empty() {
        return Err(FwlError::config("seq_len", "training corpus is shorter than one window"));
    }
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).map_err(|e| FwlError::io(dir, e))?;
    }
    let metrics_path = out.path("metrics.jsonl");

    let mut ckpt = start;
    let n_params = ckpt.model.num_params();
    let mut opt = ckpt.optimizer.take().unwrap_or_else(|| AdamState::new(n_params));
    if opt.m.len() != n_params {
        return Err(FwlError::Format("optimizer state does not match the model".into()));
    }
    let mut model = ckpt.model.clone();
    let mut metrics = Vec::new();
    let mut dev_history = Vec::new();
    let mut best_dev = ckpt.best_dev;
    let mut epoch_cache: Option<(usize, Vec<usize>)> = None;

    let mut eval_and_save = |model: &Model, opt: &AdamState, step: u64, best_dev: &mut Option<f64>| -> Result<()> {
        let Some(dev) = dev else { return Ok(()) };
        let loss = evaluate(model, dev, &cfg, cfg.eval_windows)?;
        dev_history.push((step, loss));
        if let Some(p) = &metrics_path {
            append_jsonl(p, &serde_json::json!({"step": step, "dev_loss": loss, "dev_ppl": loss.exp()}))?;
        }
        if best_dev.is_none_or(|b| loss < b) {
            *best_dev = Some(loss);
            if let Some(p) = out.path("best.ckpt") {
                Checkpoint {
                    model: model.clone(),
                    train: cfg.clone(),
                    tokenizer: ckpt.tokenizer.clone(),
                    optimizer: Some(opt.clone()),
                    step,
                    best_dev: *best_dev,
                }
                .save(&p)?;
            }
        }
        Ok(())
    };

    let bsz = cfg.batch_size;
    while (opt.t as usize) < cfg.steps {
        let step = opt.t as usize;
        let mut batch = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let i = step * bsz + b;
            let epoch = i / starts.len();
            if epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut order: Vec<usize> = (0..starts.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64));
                order.shuffle(&mut rng);
                epoch_cache = Some((epoch, order));
            }
            let order = &epoch_cache.as_ref().expect("filled").1;
            let o = starts[order[i % starts.len()]];
            batch.push(stream[o..o + w].to_vec());
        }
        let m = train_step(&mut model, &mut opt, &batch, &cfg)?;
        if let Some(p) = &metrics_path {
            append_jsonl(p, &serde_json::to_value(&m).expect("serializable"))?;
        }
        metrics.push(m);
        let done = opt.t as usize;
        if cfg.eval_every > 0 && done.is_multiple_of(cfg.eval_every) && done < cfg.steps {
            eval_and_save(&model, &opt, opt.t, &mut best_dev)?;
        }
    }
    eval_and_save(&model, &opt, opt.t, &mut best_dev)?;

    let final_ckpt = Checkpoint {
        model,
        train: cfg,
        tokenizer: ckpt.tokenizer.clone(),
        step: opt.t,
        optimizer: Some(opt),
        best_dev,
    };
    if let Some(p) = out.path("final.ckpt") {
        final_ckpt.save(&p)?;
    }
    Ok(FitOutcome {
        checkpoint: final_ckpt,
        best_dev,
        metrics,
        dev_history,
    })
}
