use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{forward_flops_per_token, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::Result;
use crate::layer::{FastMask, HeadTensor};
use crate::linear_attention::chunked_flops;

use super::dyneval::dynamic_evaluate;
use super::score::{score, ScoreOptions, Variant};

/// Analytic FLOPs for one segment of `seq_len` tokens (multiply-add = 2).
///
/// Head terms count matmuls, the linear-attention kernels and the cumsum
/// additions; a softmax is counted as `3·V` (exp, sum, divide).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub seq_len: usize,
    pub backbone: u64,
    pub head_forward: u64,
    pub softmax: u64,
    /// Per-position upstream gradients (no weight gradients are formed).
    pub head_backward: u64,
    /// Second head evaluation plus linear attention and cumsums.
    pub fast_pass: u64,
    pub extra_softmax: u64,
}

impl FlopReport {
    pub fn baseline_total(&self) -> u64 {
        self.backbone + self.head_forward + self.softmax
    }

    pub fn fwl_total(&self) -> u64 {
        self.baseline_total() + self.head_backward + self.fast_pass + self.extra_softmax
    }

    /// FWL cost over baseline cost, minus one.
    pub fn overhead(&self) -> f64 {
        self.fwl_total() as f64 / self.baseline_total() as f64 - 1.0
    }
}

pub fn flop_report(
    cfg: &BackboneConfig,
    d_hidden: usize,
    mask: FastMask,
    seq_len: usize,
    chunk: usize,
) -> FlopReport {
    let t = seq_len as u64;
    let (d, dh, v) = (cfg.d_model as u64, d_hidden as u64, cfg.vocab_size as u64);
    let head_mm = 2 * d * dh + 2 * dh * d + 2 * d * v;
    let mut fast = head_mm * t;
    for tensor in mask.iter() {
        fast += match tensor {
            HeadTensor::U => chunked_flops(seq_len, cfg.d_model, d_hidden, chunk),
            HeadTensor::W => chunked_flops(seq_len, d_hidden, cfg.d_model, chunk),
            HeadTensor::E => chunked_flops(seq_len, cfg.d_model, cfg.vocab_size, chunk),
            HeadTensor::A => dh * t,
            HeadTensor::C => v * t,
            HeadTensor::B | HeadTensor::LnGain | HeadTensor::LnBias => d * t,
        };
    }
    FlopReport {
        seq_len,
        backbone: forward_flops_per_token(cfg, seq_len, cfg.memory_len) * t,
        head_forward: head_mm * t,
        softmax: 3 * v * t,
        head_backward: (2 * d * v + 2 * d * dh) * t,
        fast_pass: fast,
        extra_softmax: 3 * v * t,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub flops: FlopReport,
    pub baseline_tokens_per_sec: f64,
    pub fwl_tokens_per_sec: f64,
    pub dyneval_tokens_per_sec: f64,
}

impl BenchReport {
    pub fn fwl_wall_overhead(&self) -> f64 {
        self.baseline_tokens_per_sec / self.fwl_tokens_per_sec - 1.0
    }

    /// Dynamic-evaluation time per token over baseline time per token.
    pub fn dyneval_cost_ratio(&self) -> f64 {
        self.baseline_tokens_per_sec / self.dyneval_tokens_per_sec
    }

    pub fn to_text(&self) -> String {
        let f = &self.flops;
        let mut s = String::new();
        let per = |x: u64| x as f64 / f.seq_len as f64;
        let _ = writeln!(s, "flops per token (segment length {})", f.seq_len);
        for (name, v) in [
            ("backbone", f.backbone),
            ("head_forward", f.head_forward),
            ("softmax", f.softmax),
            ("head_backward", f.head_backward),
            ("fast_pass", f.fast_pass),
            ("extra_softmax", f.extra_softmax),
        ] {
            let _ = writeln!(s, "  {name:<14} {:>14.1}", per(v));
        }
        let _ = writeln!(s, "  {:<14} {:>14.1}", "baseline", per(f.baseline_total()));
        let _ = writeln!(s, "  {:<14} {:>14.1}", "fwl", per(f.fwl_total()));
        let _ = writeln!(s, "  fwl flop overhead {:.1}%", 100.0 * f.overhead());
        let _ = writeln!(s, "tokens/sec");
        let _ = writeln!(s, "  baseline {:>12.1}", self.baseline_tokens_per_sec);
        let _ = writeln!(s, "  fwl      {:>12.1}", self.fwl_tokens_per_sec);
        let _ = writeln!(s, "  dyneval  {:>12.1}", self.dyneval_tokens_per_sec);
        let _ = writeln!(s, "  fwl wall overhead {:.1}%", 100.0 * self.fwl_wall_overhead());
        let _ = writeln!(s, "  dyneval cost ratio {:.2}x", self.dyneval_cost_ratio());
        s
    }
}

/// Analytic FLOPs plus measured throughput of baseline, FWL and dynamic evaluation.
pub fn bench(ckpt: &Checkpoint, corpus: &Corpus, dyneval_step: f64) -> Result<BenchReport> {
    let opts = ScoreOptions::default();
    let seq_len = ckpt.train.seq_len.min(ckpt.model.config().max_seq_len);
    let flops = flop_report(
        ckpt.model.config(),
        ckpt.model.head.d_hidden(),
        ckpt.model.steps.mask,
        seq_len,
        opts.chunk_size,
    );
    let base = score(ckpt, corpus, Variant::Baseline, &opts)?;
    let fwl = score(ckpt, corpus, Variant::Fwl, &opts)?;
    let dyn_eval = dynamic_evaluate(ckpt, corpus, dyneval_step, seq_len)?;
    Ok(BenchReport {
        flops,
        baseline_tokens_per_sec: base.tokens_per_sec(),
        fwl_tokens_per_sec: fwl.tokens_per_sec(),
        dyneval_tokens_per_sec: dyn_eval.tokens_per_sec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size: 10,
            d_model: 4,
            n_layers: layers,
            n_heads: 1,
            d_ff: 8,
            max_seq_len: 4,
            memory_len: 0,
            seed: 0,
        }
    }

    #[test]
    fn hand_count() {
        // d=4, dh=6, V=10, T=2, chunk 64 (single chunk), mask = {E, c}
        let mask: FastMask = "E,c".parse().unwrap();
        let r = flop_report(&cfg(1), 6, mask, 2, 64);
        // head matmuls per token: 2*4*6 + 2*6*4 + 2*4*10 = 48 + 48 + 80 = 176
        assert_eq!(r.head_forward, 352);
        assert_eq!(r.softmax, 60);
        // g_u: 2*4*10 = 80, g_v: 2*4*6 = 48 → 128 per token
        assert_eq!(r.head_backward, 256);
        // E attention with T=2: one pair, 2*4 + 2*10 = 28; c cumsum: 10 per token
        assert_eq!(r.fast_pass, 352 + 28 + 20);
        // backbone per token: proj 2*4*12 + 2*4*4 = 128, attn 4*avg_span(1)*4 = 16, ffn 4*4*8 = 128
        assert_eq!(r.backbone, 2 * 272);
    }

    #[test]
    fn overhead_vanishes_with_depth() {
        let shallow = flop_report(&cfg(1), 6, FastMask::ALL, 4, 64).overhead();
        let deep = flop_report(&cfg(1000), 6, FastMask::ALL, 4, 64).overhead();
        assert!(deep < shallow / 100.0);
        assert!(deep > 0.0);
    }
}
