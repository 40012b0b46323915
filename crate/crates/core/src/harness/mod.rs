//! Evaluation harness: scoring variants, dynamic evaluation, ablations,
//! per-token analysis, cost accounting and generation.

pub mod ablate;
pub mod analyze;
pub mod bench;
pub mod dyneval;
pub mod experiment;
pub mod generate;
pub mod score;
pub mod verify;

pub use ablate::{ablate, AblationInputs, AblationRow, AblationSettings, AblationTable};
pub use analyze::{analyze, AnalysisReport, Bucket};
pub use bench::{bench, flop_report, BenchReport, FlopReport};
pub use dyneval::{dynamic_evaluate, DynEvalResult};
pub use generate::{generate, repeat_ngram_rate, GenerateOptions, Generation};
pub use score::{check_tokenizer, score, tune_global_step, ScoreOptions, ScoreResult, Variant};
pub use verify::{verify, Check};
