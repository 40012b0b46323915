use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, SegmentMemory};
use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, EOS_ID};
use crate::error::{FwlError, Result};
use crate::layer::{
    fast_forward, per_position_grads, slow_forward, update_stream_state, FastMask, StepSizes, Stream, StreamState,
};
use crate::linear_attention::DEFAULT_CHUNK;
use crate::training::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Slow weights only.
    Baseline,
    /// Fast weights with the checkpoint's step sizes and mask.
    Fwl,
    /// Every tensor fast with one global step size (for slow-only checkpoints).
    TestTimeOnly,
    /// Only the output bias is fast.
    BiasOnly,
}

impl FromStr for Variant {
    type Err = FwlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "fwl" => Ok(Variant::Fwl),
            "test-time-only" => Ok(Variant::TestTimeOnly),
            "bias-only" => Ok(Variant::BiasOnly),
            _ => Err(FwlError::config(
                "variant",
                format!("expected baseline, fwl, test-time-only or bias-only, got `{s}`"),
            )),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Fwl => "fwl",
            Variant::TestTimeOnly => "test-time-only",
            Variant::BiasOnly => "bias-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreOptions {
    /// Segment length; defaults to the checkpoint's training `seq_len`.
    pub seq_len: Option<usize>,
    pub chunk_size: usize,
    /// Step size used by [`Variant::TestTimeOnly`].
    pub global_alpha: f64,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            seq_len: None,
            chunk_size: DEFAULT_CHUNK,
            global_alpha: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreResult {
    pub perplexity: f64,
    pub mean_nll: f64,
    /// Per-document NLL of every document token, in order.
    pub nll: Vec<Vec<f64>>,
    pub tokens: usize,
    pub seconds: f64,
}

impl ScoreResult {
    pub fn tokens_per_sec(&self) -> f64 {
        self.tokens as f64 / self.seconds.max(1e-9)
    }
}

/// Step sizes a variant scores with; `None` is the slow path.
pub fn variant_steps(model: &Model, variant: Variant, opts: &ScoreOptions) -> Option<StepSizes> {
    match variant {
        Variant::Baseline => None,
        Variant::Fwl => Some(model.steps.clone()),
        Variant::TestTimeOnly => Some(StepSizes::uniform(FastMask::ALL, opts.global_alpha)),
        Variant::BiasOnly => Some(StepSizes {
            alpha: model.steps.alpha,
            mask: FastMask::BIAS_ONLY,
        }),
    }
}

pub fn check_tokenizer(ckpt: &Checkpoint, corpus: &Corpus) -> Result<()> {
    match &ckpt.tokenizer {
        Some(t) if *t != corpus.tokenizer => Err(FwlError::config(
            "tokenizer",
            "checkpoint tokenizer does not match the corpus tokenizer",
        )),
        _ if corpus.tokenizer.vocab_size() != ckpt.model.vocab_size() => Err(FwlError::config(
            "tokenizer",
            format!(
                "corpus vocabulary has {} symbols, checkpoint expects {}",
                corpus.tokenizer.vocab_size(),
                ckpt.model.vocab_size()
            ),
        )),
        _ => Ok(()),
    }
}

/// NLL of every token of one document, predicted from `<eos>` + prefix.
///
/// The document is processed in segments of `seq_len`; backbone memory and
/// the fast-weight stream state are threaded across segments and start empty.
pub fn score_document(
    model: &Model,
    steps: Option<&StepSizes>,
    doc: &[usize],
    seq_len: usize,
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut inputs = Vec::with_capacity(doc.len());
    inputs.push(EOS_ID);
    inputs.extend_from_slice(&doc[..doc.len().saturating_sub(1)]);
    let mut memory = SegmentMemory::empty(model.config());
    let mut state = steps.map(|s| StreamState::empty(&model.head, s.mask));
    let mut out = Vec::with_capacity(doc.len());
    for lo in (0..doc.len()).step_by(seq_len) {
        let hi = (lo + seq_len).min(doc.len());
        let (h, mem) = backbone::encode_segment(&model.backbone, &inputs[lo..hi], &memory)?;
        memory = mem;
        let ys = &doc[lo..hi];
        let (tape, slow) = slow_forward(&model.head, &h, ys)?;
        match (steps, state.as_mut()) {
            (Some(st), Some(stream_state)) => {
                let pg = per_position_grads(&model.head, &tape, ys)?;
                let stream = Stream {
                    state: stream_state,
                    decays: &model.decays,
                };
                let fast = fast_forward(&model.head, st, &tape, &pg, Some(stream), chunk)?;
                out.extend(fast.losses);
                *stream_state = update_stream_state(stream_state, &pg, &tape, &model.decays);
            }
            _ => out.extend(slow),
        }
    }
    Ok(out)
}

/// Perplexity of a variant over a corpus; state resets at every document.
pub fn score(ckpt: &Checkpoint, corpus: &Corpus, variant: Variant, opts: &ScoreOptions) -> Result<ScoreResult> {
    check_tokenizer(ckpt, corpus)?;
    let model = &ckpt.model;
    let seq_len = opts.seq_len.unwrap_or(ckpt.train.seq_len).min(model.config().max_seq_len);
    if seq_len == 0 || opts.chunk_size == 0 {
        return Err(FwlError::config("seq_len", "must be positive"));
    }
    let steps = variant_steps(model, variant, opts);
    let start = Instant::now();
    let mut nll = Vec::with_capacity(corpus.documents.len());
    for doc in &corpus.documents {
        nll.push(score_document(model, steps.as_ref(), doc, seq_len, opts.chunk_size)?);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(summarize(nll, seconds))
}

pub(crate) fn summarize(nll: Vec<Vec<f64>>, seconds: f64) -> ScoreResult {
    let tokens: usize = nll.iter().map(Vec::len).sum();
    let total: f64 = nll.iter().flatten().sum();
    let mean_nll = total / tokens.max(1) as f64;
    ScoreResult {
        perplexity: mean_nll.exp(),
        mean_nll,
        nll,
        tokens,
        seconds,
    }
}

/// Picks the global step size with the lowest test-time-only perplexity;
/// ties go to the smaller step.
pub fn tune_global_step(ckpt: &Checkpoint, dev: &Corpus, grid: &[f64], opts: &ScoreOptions) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(FwlError::config("grid", "must contain at least one step size"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for alpha in sorted {
        let o = ScoreOptions {
            global_alpha: alpha,
            ..opts.clone()
        };
        let ppl = score(ckpt, dev, Variant::TestTimeOnly, &o)?.perplexity;
        if best.is_none_or(|(_, b)| ppl < b) {
            best = Some((alpha, ppl));
        }
    }
    Ok(best.expect("non-empty grid"))
}
