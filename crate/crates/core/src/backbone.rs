//! Small pre-norm causal transformer producing the context vectors `h_1..h_T`.
//!
//! Supports a segment-recurrent mode: each layer can attend over cached
//! inputs of the previous segment (`SegmentMemory`). The memory is a constant
//! for differentiation; gradients still reach the projection weights applied
//! to it, but never the cached activations themselves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FwlError, Result};
use crate::numerics::{
    layernorm_rows, layernorm_rows_bwd, mm, mm_nt, mm_tn, softmax, LayerNormRows, Matrix, Vector,
};
use crate::params::ParamSet;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Cached positions per layer; 0 disables recurrence.
    pub memory_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            memory_len: 0,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(FwlError::config(name, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FwlError::config(
                "n_heads",
                format!("d_model={} is not divisible by n_heads={}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_g: Vector,
    pub ln1_b: Vector,
    pub w_qkv: Matrix,
    pub b_qkv: Vector,
    pub w_o: Matrix,
    pub b_o: Vector,
    pub ln2_g: Vector,
    pub ln2_b: Vector,
    pub w_1: Matrix,
    pub b_1: Vector,
    pub w_2: Matrix,
    pub b_2: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vector,
    pub lnf_b: Vector,
}

impl ParamSet for BackboneParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("tok_emb", &[self.tok_emb.rows(), self.tok_emb.cols()], self.tok_emb.data());
        f("pos_emb", &[self.pos_emb.rows(), self.pos_emb.cols()], self.pos_emb.data());
        for (i, l) in self.layers.iter().enumerate() {
            let mats = [("w_qkv", &l.w_qkv), ("w_o", &l.w_o), ("w_1", &l.w_1), ("w_2", &l.w_2)];
            let vecs = [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("b_qkv", &l.b_qkv),
                ("b_o", &l.b_o),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("b_1", &l.b_1),
                ("b_2", &l.b_2),
            ];
            for (n, m) in mats {
                f(&format!("layers.{i}.{n}"), &[m.rows(), m.cols()], m.data());
            }
            for (n, v) in vecs {
                f(&format!("layers.{i}.{n}"), &[v.len()], v);
            }
        }
        f("lnf_g", &[self.lnf_g.len()], &self.lnf_g);
        f("lnf_b", &[self.lnf_b.len()], &self.lnf_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("tok_emb", self.tok_emb.data_mut());
        f("pos_emb", self.pos_emb.data_mut());
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.w_qkv"), l.w_qkv.data_mut());
            f(&format!("layers.{i}.w_o"), l.w_o.data_mut());
            f(&format!("layers.{i}.w_1"), l.w_1.data_mut());
            f(&format!("layers.{i}.w_2"), l.w_2.data_mut());
            f(&format!("layers.{i}.ln1_g"), &mut l.ln1_g);
            f(&format!("layers.{i}.ln1_b"), &mut l.ln1_b);
            f(&format!("layers.{i}.b_qkv"), &mut l.b_qkv);
            f(&format!("layers.{i}.b_o"), &mut l.b_o);
            f(&format!("layers.{i}.ln2_g"), &mut l.ln2_g);
            f(&format!("layers.{i}.ln2_b"), &mut l.ln2_b);
            f(&format!("layers.{i}.b_1"), &mut l.b_1);
            f(&format!("layers.{i}.b_2"), &mut l.b_2);
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
    }
}

impl BackboneParams {
    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, d| d.iter_mut().for_each(|x| *x = 0.0));
        z
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
        .expect("sized")
}

/// Deterministic initialization from `config.seed`.
pub fn init_backbone(config: &BackboneConfig) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let f = config.d_ff;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let tok_emb = normal_matrix(&mut rng, config.vocab_size, d, 0.02);
    let pos_emb = normal_matrix(&mut rng, config.max_seq_len, d, 0.02);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_g: vec![1.0; d],
            ln1_b: vec![0.0; d],
            w_qkv: normal_matrix(&mut rng, d, 3 * d, fan(d)),
            b_qkv: vec![0.0; 3 * d],
            w_o: normal_matrix(&mut rng, d, d, fan(d)),
            b_o: vec![0.0; d],
            ln2_g: vec![1.0; d],
            ln2_b: vec![0.0; d],
            w_1: normal_matrix(&mut rng, d, f, fan(d)),
            b_1: vec![0.0; f],
            w_2: normal_matrix(&mut rng, f, d, fan(f)),
            b_2: vec![0.0; d],
        })
        .collect();
    Ok(BackboneParams {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
        lnf_g: vec![1.0; d],
        lnf_b: vec![0.0; d],
    })
}

/// Per-layer cached inputs of the previous segment. Constant under differentiation.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMemory {
    pub layers: Vec<Matrix>,
}

impl SegmentMemory {
    pub fn empty(config: &BackboneConfig) -> Self {
        SegmentMemory {
            layers: vec![Matrix::zeros(0, config.d_model); config.n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |m| m.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerCache {
    /// `[memory; x]`, the rows keys/values are computed from.
    x_full: Matrix,
    ln1: LayerNormRows,
    a_full: Matrix,
    qkv: Matrix,
    /// One `T × (M+T)` probability matrix per head.
    probs: Vec<Matrix>,
    attn: Matrix,
    ln2: LayerNormRows,
    f: Matrix,
    pre: Matrix,
    act: Matrix,
}

/// Everything the backward pass needs from one segment.
pub struct BackboneCache {
    tokens: Vec<usize>,
    mem_len: usize,
    layers: Vec<LayerCache>,
    lnf: LayerNormRows,
}

fn check_tokens(config: &BackboneConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(FwlError::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(FwlError::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(FwlError::Input(format!(
            "token id {bad} out of vocabulary (size {})",
            config.vocab_size
        )));
    }
    Ok(())
}

/// `h_1..h_T` for a standalone sequence.
pub fn encode(params: &BackboneParams, tokens: &[usize]) -> Result<Matrix> {
    let mem = SegmentMemory::empty(&params.config);
    Ok(forward(params, tokens, &mem)?.0)
}

/// Encodes one segment attending over `memory`; returns the new memory.
pub fn encode_segment(
    params: &BackboneParams,
    tokens: &[usize],
    memory: &SegmentMemory,
) -> Result<(Matrix, SegmentMemory)> {
    let (h, _, mem) = forward(params, tokens, memory)?;
    Ok((h, mem))
}

/// Forward pass keeping the activations needed by [`backward`].
pub fn forward(
    params: &BackboneParams,
    tokens: &[usize],
    memory: &SegmentMemory,
) -> Result<(Matrix, BackboneCache, SegmentMemory)> {
    let cfg = &params.config;
    check_tokens(cfg, tokens)?;
    if memory.layers.len() != cfg.n_layers
        || memory.layers.iter().any(|m| m.cols() != cfg.d_model && m.rows() > 0)
    {
        return Err(FwlError::State("segment memory shape does not match backbone".into()));
    }
    let t_len = tokens.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mem_len = memory.len();

    let mut x = Matrix::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        for j in 0..d {
            row[j] = params.tok_emb[(tok, j)] + params.pos_emb[(t, j)];
        }
    }

    let mut caches = Vec::with_capacity(cfg.n_layers);
    let mut new_mem = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in params.layers.iter().enumerate() {
        let x_full = memory.layers[l].vstack(&x)?;
        if cfg.memory_len > 0 {
            let keep = x_full.rows().min(cfg.memory_len);
            new_mem.push(x_full.slice_rows(x_full.rows() - keep, x_full.rows()));
        } else {
            new_mem.push(Matrix::zeros(0, d));
        }
        let n_full = x_full.rows();
        let (a_full, ln1) = layernorm_rows(&x_full, &lp.ln1_g, &lp.ln1_b);
        let mut qkv = mm(&a_full, &lp.w_qkv);
        qkv.add_row_broadcast(&lp.b_qkv);

        let mut attn = Matrix::zeros(t_len, d);
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let mut p = Matrix::zeros(t_len, n_full);
            for t in 0..t_len {
                let qrow = &qkv.row(mem_len + t)[h * hd..(h + 1) * hd];
                let visible = mem_len + t + 1;
                let scores: Vec<f64> = (0..visible)
                    .map(|j| {
                        let krow = &qkv.row(j)[d + h * hd..d + (h + 1) * hd];
                        scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                let pr = softmax(&scores);
                let out = &mut attn.row_mut(t)[h * hd..(h + 1) * hd];
                for (j, &pj) in pr.iter().enumerate() {
                    p[(t, j)] = pj;
                    let vrow = &qkv.row(j)[2 * d + h * hd..2 * d + (h + 1) * hd];
                    for (o, v) in out.iter_mut().zip(vrow) {
                        *o += pj * v;
                    }
                }
            }
            probs.push(p);
        }
        let mut proj = mm(&attn, &lp.w_o);
        proj.add_row_broadcast(&lp.b_o);
        let mut x1 = x.clone();
        x1.add_assign(&proj);

        let (f, ln2) = layernorm_rows(&x1, &lp.ln2_g, &lp.ln2_b);
        let mut pre = mm(&f, &lp.w_1);
        pre.add_row_broadcast(&lp.b_1);
        let act = pre.map(gelu);
        let mut ff = mm(&act, &lp.w_2);
        ff.add_row_broadcast(&lp.b_2);
        let mut x2 = x1.clone();
        x2.add_assign(&ff);

        caches.push(LayerCache {
            x_full,
            ln1,
            a_full,
            qkv,
            probs,
            attn,
            ln2,
            f,
            pre,
            act,
        });
        x = x2;
    }
    let (h, lnf) = layernorm_rows(&x, &params.lnf_g, &params.lnf_b);
    Ok((
        h,
        BackboneCache {
            tokens: tokens.to_vec(),
            mem_len,
            layers: caches,
            lnf,
        },
        SegmentMemory { layers: new_mem },
    ))
}

/// Accumulates `∂⟨dh, H⟩/∂params` into `grads`. No gradient is produced for the memory.
pub fn backward(params: &BackboneParams, cache: &BackboneCache, dh: &Matrix, grads: &mut BackboneParams) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let t_len = cache.tokens.len();
    let m = cache.mem_len;

    let (mut dx, dg, db) = layernorm_rows_bwd(&cache.lnf, &params.lnf_g, dh);
    add_vec(&mut grads.lnf_g, &dg);
    add_vec(&mut grads.lnf_b, &db);

    for l in (0..cfg.n_layers).rev() {
        let lp = &params.layers[l];
        let lc = &cache.layers[l];
        let gl = &mut grads.layers[l];

        // feed-forward
        gl.w_2.add_assign(&mm_tn(&lc.act, &dx));
        add_vec(&mut gl.b_2, &dx.col_sums());
        let mut dpre = mm_nt(&dx, &lp.w_2);
        for (dv, &p) in dpre.data_mut().iter_mut().zip(lc.pre.data()) {
            *dv *= gelu_grad(p);
        }
        gl.w_1.add_assign(&mm_tn(&lc.f, &dpre));
        add_vec(&mut gl.b_1, &dpre.col_sums());
        let df = mm_nt(&dpre, &lp.w_1);
        let (dx1_ln, dg2, db2) = layernorm_rows_bwd(&lc.ln2, &lp.ln2_g, &df);
        add_vec(&mut gl.ln2_g, &dg2);
        add_vec(&mut gl.ln2_b, &db2);
        let mut dx1 = dx;
        dx1.add_assign(&dx1_ln);

        // attention output projection
        gl.w_o.add_assign(&mm_tn(&lc.attn, &dx1));
        add_vec(&mut gl.b_o, &dx1.col_sums());
        let dattn = mm_nt(&dx1, &lp.w_o);

        let n_full = lc.x_full.rows();
        let mut dqkv = Matrix::zeros(n_full, 3 * d);
        for h in 0..nh {
            let p = &lc.probs[h];
            for t in 0..t_len {
                let visible = m + t + 1;
                let da = &dattn.row(t)[h * hd..(h + 1) * hd];
                // dP_tj = da · v_j
                let mut dp = vec![0.0; visible];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let vrow = &lc.qkv.row(j)[2 * d + h * hd..2 * d + (h + 1) * hd];
                    *dpj = da.iter().zip(vrow).map(|(a, b)| a * b).sum();
                }
                let inner: f64 = (0..visible).map(|j| dp[j] * p[(t, j)]).sum();
                let qrow: Vec<f64> = lc.qkv.row(m + t)[h * hd..(h + 1) * hd].to_vec();
                let mut dq = vec![0.0; hd];
                for j in 0..visible {
                    let pj = p[(t, j)];
                    // dV_j += p_tj * da
                    {
                        let dv = &mut dqkv.row_mut(j)[2 * d + h * hd..2 * d + (h + 1) * hd];
                        for (a, b) in dv.iter_mut().zip(da) {
                            *a += pj * b;
                        }
                    }
                    let ds = pj * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &lc.qkv.row(j)[d + h * hd..d + (h + 1) * hd];
                    for (a, b) in dq.iter_mut().zip(krow) {
                        *a += ds * b;
                    }
                    let dk = &mut dqkv.row_mut(j)[d + h * hd..d + (h + 1) * hd];
                    for (a, b) in dk.iter_mut().zip(&qrow) {
                        *a += ds * b;
                    }
                }
                let dqrow = &mut dqkv.row_mut(m + t)[h * hd..(h + 1) * hd];
                for (a, b) in dqrow.iter_mut().zip(&dq) {
                    *a += b;
                }
            }
        }
        gl.w_qkv.add_assign(&mm_tn(&lc.a_full, &dqkv));
        add_vec(&mut gl.b_qkv, &dqkv.col_sums());
        let da_full = mm_nt(&dqkv, &lp.w_qkv);
        let (dx_full, dg1, db1) = layernorm_rows_bwd(&lc.ln1, &lp.ln1_g, &da_full);
        add_vec(&mut gl.ln1_g, &dg1);
        add_vec(&mut gl.ln1_b, &db1);
        // memory rows are constants: drop their input gradient
        let mut dx_prev = dx1;
        for t in 0..t_len {
            for (a, b) in dx_prev.row_mut(t).iter_mut().zip(dx_full.row(m + t)) {
                *a += b;
            }
        }
        dx = dx_prev;
    }

    for (t, &tok) in cache.tokens.iter().enumerate() {
        let row = dx.row(t);
        for j in 0..d {
            grads.tok_emb[(tok, j)] += row[j];
            grads.pos_emb[(t, j)] += row[j];
        }
    }
}

fn add_vec(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Forward FLOPs per token (multiply-add = 2) for a segment of length `t`
/// attending over `mem` cached positions. Attention cost uses the average span.
pub fn forward_flops_per_token(cfg: &BackboneConfig, t: usize, mem: usize) -> u64 {
    let d = cfg.d_model as u64;
    let f = cfg.d_ff as u64;
    let avg_span = mem as u64 + (t as u64).div_ceil(2);
    let proj = 2 * d * 3 * d + 2 * d * d;
    let attn = 2 * 2 * avg_span * d;
    let ffn = 2 * 2 * d * f;
    cfg.n_layers as u64 * (proj + attn + ffn)
}
