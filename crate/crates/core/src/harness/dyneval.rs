use std::time::Instant;

use crate::backbone::{self, SegmentMemory};
use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, EOS_ID};
use crate::error::{FwlError, Result};
use crate::layer::{per_position_grads, slow_backward, slow_forward};
use crate::params::ParamSet;

use super::score::{check_tokenizer, summarize, ScoreResult};

pub type DynEvalResult = ScoreResult;

/// Chunked dynamic evaluation: score a chunk with the current weights, take
/// one SGD step on that chunk's mean loss over every backbone and head
/// parameter, move on. Weights reset to the checkpoint for each document.
pub fn dynamic_evaluate(ckpt: &Checkpoint, corpus: &Corpus, step_size: f64, chunk_len: usize) -> Result<DynEvalResult> {
    check_tokenizer(ckpt, corpus)?;
    let max = ckpt.model.config().max_seq_len;
    if chunk_len == 0 || chunk_len > max {
        return Err(FwlError::config("chunk_len", format!("must be in 1..={max}")));
    }
    if !step_size.is_finite() {
        return Err(FwlError::config("step_size", "must be finite"));
    }
    let start = Instant::now();
    let mut nll = Vec::with_capacity(corpus.documents.len());
    for doc in &corpus.documents {
        let mut bb = ckpt.model.backbone.clone();
        let mut head = ckpt.model.head.clone();
        let mut inputs = vec![EOS_ID];
        inputs.extend_from_slice(&doc[..doc.len() - 1]);
        let mut memory = SegmentMemory::empty(&bb.config);
        let mut out = Vec::with_capacity(doc.len());
        for lo in (0..doc.len()).step_by(chunk_len) {
            let hi = (lo + chunk_len).min(doc.len());
            let ys = &doc[lo..hi];
            let (h, cache, mem) = backbone::forward(&bb, &inputs[lo..hi], &memory)?;
            let (tape, losses) = slow_forward(&head, &h, ys)?;
            out.extend_from_slice(&losses);
            memory = mem;
            if step_size == 0.0 || hi == doc.len() {
                continue;
            }
            let pg = per_position_grads(&head, &tape, ys)?;
            let w = vec![1.0 / (hi - lo) as f64; hi - lo];
            let (d_head, dh) = slow_backward(&head, &tape, &pg, &w);
            let mut d_bb = bb.zeros_like();
            backbone::backward(&bb, &cache, &dh, &mut d_bb);
            bb.axpy_flat(-step_size, &d_bb.flatten());
            head.axpy_flat(-step_size, &d_head.flatten());
        }
        nll.push(out);
    }
    Ok(summarize(nll, start.elapsed().as_secs_f64()))
}
