//! End-to-end run on the synthetic entity corpus: train the three models,
//! tune the test-time and dynamic-evaluation step sizes, score the ablation
//! grid and bucket the per-token improvements.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::checkpoint::Checkpoint;
use crate::corpus::{generate_entity_corpus, Corpus, EntityCorpusConfig, TokenizerKind};
use crate::error::{FwlError, Result};
use crate::layer::FastMask;
use crate::training::{fit, FitOutput, Mode, Model, TrainConfig};

use super::ablate::{ablate, AblationInputs, AblationSettings, AblationTable};
use super::analyze::{analyze, AnalysisReport};
use super::dyneval::dynamic_evaluate;
use super::score::{score, tune_global_step, ScoreOptions, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: EntityCorpusConfig,
    pub dev_docs: usize,
    pub tune_docs: usize,
    /// `vocab_size` and `seed` are filled in per run.
    pub backbone: BackboneConfig,
    pub d_hidden: usize,
    /// `mode`, `mask` and `seed` are set per model.
    pub train: TrainConfig,
    pub alpha_grid: Vec<f64>,
    pub dyneval_grid: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: EntityCorpusConfig {
                n_docs: 300,
                ..Default::default()
            },
            dev_docs: 40,
            tune_docs: 20,
            backbone: BackboneConfig {
                vocab_size: 0,
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                d_ff: 64,
                max_seq_len: 16,
                memory_len: 16,
                seed: 0,
            },
            d_hidden: 64,
            train: TrainConfig {
                lr: 3e-3,
                batch_size: 8,
                seq_len: 16,
                segments: 4,
                steps: 400,
                warmup_steps: 40,
                eval_every: 0,
                ..Default::default()
            },
            alpha_grid: vec![0.0, 0.0003, 0.001, 0.003, 0.01, 0.03, 0.1],
            dyneval_grid: vec![0.0, 0.003, 0.01, 0.03, 0.1, 0.3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub seed: u64,
    pub table: AblationTable,
    pub analysis: AnalysisReport,
    pub test_time_alpha: f64,
    pub dyneval_step: f64,
    pub train_seconds: f64,
    pub parameters: usize,
    pub fwl_alphas: [f64; 8],
    pub fwl_gammas: [f64; 8],
}

pub struct ExperimentData {
    pub train: Corpus,
    pub dev: Corpus,
    pub tune: Corpus,
}

/// Train, dev and tune splits, all generated from `cfg.corpus.seed` so that
/// runs with different training seeds share the same data.
pub fn experiment_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let gen = |n_docs: usize, salt: u64| {
        generate_entity_corpus(&EntityCorpusConfig {
            n_docs,
            seed: cfg.corpus.seed.wrapping_mul(1000).wrapping_add(salt),
            ..cfg.corpus.clone()
        })
    };
    let train = Corpus::from_text(&gen(cfg.corpus.n_docs, 0)?, TokenizerKind::Word, None)?;
    let dev = Corpus::from_text(&gen(cfg.dev_docs, 1)?, TokenizerKind::Word, Some(&train.tokenizer))?;
    let tune = Corpus::from_text(&gen(cfg.tune_docs, 2)?, TokenizerKind::Word, Some(&train.tokenizer))?;
    Ok(ExperimentData { train, dev, tune })
}

/// Trains one model of the grid.
pub fn train_model(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64, mode: Mode, mask: FastMask) -> Result<Checkpoint> {
    let bb = BackboneConfig {
        vocab_size: data.train.tokenizer.vocab_size(),
        seed,
        ..cfg.backbone.clone()
    };
    let train = TrainConfig {
        mode,
        mask,
        seed,
        ..cfg.train.clone()
    };
    let model = Model::new(&bb, cfg.d_hidden, mask)?;
    let start = Checkpoint::fresh(model, train, Some(data.train.tokenizer.clone()));
    Ok(fit(start, &data.train, None, &FitOutput::default())?.checkpoint)
}

pub fn run_entity_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentRun> {
    if cfg.alpha_grid.is_empty() || cfg.dyneval_grid.is_empty() {
        return Err(FwlError::config("grid", "step-size grids must be non-empty"));
    }
    let data = experiment_data(cfg)?;
    let t0 = Instant::now();
    let slow = train_model(cfg, &data, seed, Mode::SlowOnly, FastMask::ALL)?;
    let fwl = train_model(cfg, &data, seed, Mode::Full, FastMask::ALL)?;
    let bias = train_model(cfg, &data, seed, Mode::Full, FastMask::BIAS_ONLY)?;
    let train_seconds = t0.elapsed().as_secs_f64();

    let opts = ScoreOptions::default();
    let (test_time_alpha, _) = tune_global_step(&slow, &data.tune, &cfg.alpha_grid, &opts)?;
    let chunk = cfg.train.seq_len;
    let mut dyneval_step = 0.0;
    let mut best = f64::INFINITY;
    let mut grid = cfg.dyneval_grid.clone();
    grid.sort_by(f64::total_cmp);
    for s in grid {
        let ppl = dynamic_evaluate(&slow, &data.tune, s, chunk)?.perplexity;
        if ppl < best {
            best = ppl;
            dyneval_step = s;
        }
    }

    let settings = AblationSettings {
        score: opts.clone(),
        test_time_alpha,
        dyneval_step,
        dyneval_chunk: chunk,
    };
    let inputs = AblationInputs {
        slow_only: Some(&slow),
        fwl: Some(&fwl),
        bias_only: Some(&bias),
    };
    let table = ablate(inputs, &data.dev, &settings)?;
    let base = score(&slow, &data.dev, Variant::Baseline, &opts)?;
    let fast = score(&fwl, &data.dev, Variant::Fwl, &opts)?;
    let analysis = analyze(&base.nll, &fast.nll, &data.dev, &data.train.frequencies())?;
    Ok(ExperimentRun {
        seed,
        table,
        analysis,
        test_time_alpha,
        dyneval_step,
        train_seconds,
        parameters: crate::params::ParamSet::num_params(&fwl.model),
        fwl_alphas: fwl.model.steps.alpha,
        fwl_gammas: crate::layer::HeadTensor::ALL.map(|t| fwl.model.decays.gamma(t)),
    })
}
