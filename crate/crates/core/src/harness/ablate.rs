use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{FwlError, Result};

use super::dyneval::dynamic_evaluate;
use super::score::{score, ScoreOptions, ScoreResult, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub perplexity: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ROW_NAMES: [&str; 5] = ["No FWL", "FWL", "Test-time only", "Bias only", "Dynamic evaluation"];

impl AblationTable {
    pub fn get(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,perplexity,tokens_per_sec\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.1}", r.name, r.perplexity, r.tokens_per_sec);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<20} {:>12} {:>14}\n", "variant", "perplexity", "tokens/sec");
        for r in &self.rows {
            let _ = writeln!(s, "{:<20} {:>12.3} {:>14.1}", r.name, r.perplexity, r.tokens_per_sec);
        }
        s
    }
}

/// Checkpoints feeding the ablation grid.
#[derive(Clone, Copy, Debug, Default)]
pub struct AblationInputs<'a> {
    /// Trained without fast weights; used by No FWL, Test-time only and Dynamic evaluation.
    pub slow_only: Option<&'a Checkpoint>,
    pub fwl: Option<&'a Checkpoint>,
    pub bias_only: Option<&'a Checkpoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSettings {
    pub score: ScoreOptions,
    pub test_time_alpha: f64,
    pub dyneval_step: f64,
    pub dyneval_chunk: usize,
}

fn need<'a>(c: Option<&'a Checkpoint>, row: &str) -> Result<&'a Checkpoint> {
    c.ok_or_else(|| FwlError::config(row, "checkpoint missing for this row"))
}

fn row(name: &str, r: ScoreResult) -> AblationRow {
    AblationRow {
        name: name.to_string(),
        perplexity: r.perplexity,
        tokens_per_sec: r.tokens_per_sec(),
    }
}

/// Scores the five ablation rows on `corpus`.
pub fn ablate(inputs: AblationInputs<'_>, corpus: &Corpus, settings: &AblationSettings) -> Result<AblationTable> {
    let slow = need(inputs.slow_only, ROW_NAMES[0])?;
    let fwl = need(inputs.fwl, ROW_NAMES[1])?;
    let bias = need(inputs.bias_only, ROW_NAMES[3])?;
    let tto = ScoreOptions {
        global_alpha: settings.test_time_alpha,
        ..settings.score.clone()
    };
    Ok(AblationTable {
        rows: vec![
            row(ROW_NAMES[0], score(slow, corpus, Variant::Baseline, &settings.score)?),
            row(ROW_NAMES[1], score(fwl, corpus, Variant::Fwl, &settings.score)?),
            row(ROW_NAMES[2], score(slow, corpus, Variant::TestTimeOnly, &tto)?),
            row(ROW_NAMES[3], score(bias, corpus, Variant::BiasOnly, &settings.score)?),
            row(
                ROW_NAMES[4],
                dynamic_evaluate(slow, corpus, settings.dyneval_step, settings.dyneval_chunk)?,
            ),
        ],
    })
}
