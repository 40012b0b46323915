use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, SegmentMemory};
use crate::checkpoint::Checkpoint;
use crate::corpus::EOS_ID;
use crate::error::{FwlError, Result};
use crate::layer::{generate_step, observe_step, FastOffsets, StepSizes};

use super::score::{variant_steps, ScoreOptions, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub n_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub variant: Variant,
    pub global_alpha: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            n_tokens: 50,
            temperature: 1.0,
            seed: 0,
            variant: Variant::Fwl,
            global_alpha: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    pub text: String,
    /// Loss of each generated token under the fast weights it was sampled with.
    pub losses: Vec<f64>,
    pub unknown_prompt_symbols: usize,
}

/// Segment-recurrent decoder state: current segment tokens plus memory.
struct Decoder<'a> {
    ckpt: &'a Checkpoint,
    seq_len: usize,
    memory: SegmentMemory,
    segment: Vec<usize>,
}

impl Decoder<'_> {
    /// Appends `tok`, returning the context vector at its position and
    /// whether a new segment was started for it.
    fn push(&mut self, tok: usize) -> Result<(Vec<f64>, bool)> {
        let mut boundary = false;
        if self.segment.len() == self.seq_len {
            let (_, mem) = backbone::encode_segment(&self.ckpt.model.backbone, &self.segment, &self.memory)?;
            self.memory = mem;
            self.segment.clear();
            boundary = true;
        }
        self.segment.push(tok);
        let (h, _) = backbone::encode_segment(&self.ckpt.model.backbone, &self.segment, &self.memory)?;
        Ok((h.row(h.rows() - 1).to_vec(), boundary))
    }
}

/// Teacher-forces the prompt with fast updates, then samples `n_tokens`.
///
/// Segmentation follows scoring: the sequence starts with `<eos>`, segments
/// of the training length carry backbone memory, and fast-weight offsets are
/// folded into the decayed stream at every segment boundary.
pub fn generate(ckpt: &Checkpoint, prompt: &str, opts: &GenerateOptions) -> Result<Generation> {
    let tok = ckpt
        .tokenizer
        .as_ref()
        .ok_or_else(|| FwlError::config("tokenizer", "checkpoint has no tokenizer"))?;
    let (prompt_ids, unknown) = tok.encode_counting(prompt);
    let model = &ckpt.model;
    let score_opts = ScoreOptions {
        global_alpha: opts.global_alpha,
        ..Default::default()
    };
    let steps = variant_steps(model, opts.variant, &score_opts)
        .unwrap_or_else(|| StepSizes::uniform(crate::layer::FastMask::NONE, 0.0));
    let mut dec = Decoder {
        ckpt,
        seq_len: ckpt.train.seq_len.min(model.config().max_seq_len),
        memory: SegmentMemory::empty(model.config()),
        segment: Vec::new(),
    };
    let mut offsets = FastOffsets::new(&model.head, steps.mask);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let step_offsets = |offsets: &FastOffsets, boundary: bool| {
        if boundary {
            offsets.end_segment(&model.decays)
        } else {
            offsets.clone()
        }
    };

    let (mut h, mut boundary) = dec.push(EOS_ID)?;
    for &p in &prompt_ids {
        offsets = step_offsets(&offsets, boundary);
        let (_, next) = observe_step(&model.head, &steps, &offsets, &h, p)?;
        offsets = next;
        (h, boundary) = dec.push(p)?;
    }
    let mut tokens = Vec::with_capacity(opts.n_tokens);
    let mut losses = Vec::with_capacity(opts.n_tokens);
    for i in 0..opts.n_tokens {
        offsets = step_offsets(&offsets, boundary);
        let s = generate_step(&model.head, &steps, &offsets, &h, opts.temperature, &mut rng)?;
        offsets = s.offsets;
        tokens.push(s.token);
        losses.push(s.loss);
        if i + 1 < opts.n_tokens {
            (h, boundary) = dec.push(s.token)?;
        }
    }
    Ok(Generation {
        text: tok.decode(&tokens),
        prompt: prompt_ids,
        tokens,
        losses,
        unknown_prompt_symbols: unknown,
    })
}

/// Fraction of n-grams that already occurred earlier in the sequence.
pub fn repeat_ngram_rate(tokens: &[usize], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let mut seen = BTreeSet::new();
    let mut repeats = 0usize;
    let total = tokens.len() - n + 1;
    for w in tokens.windows(n) {
        if !seen.insert(w.to_vec()) {
            repeats += 1;
        }
    }
    repeats as f64 / total as f64
}
