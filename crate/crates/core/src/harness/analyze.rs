use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{FwlError, Result};

/// Mean NLL improvement (baseline − fwl) over one group of tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub group: String,
    pub label: String,
    pub count: usize,
    pub mean_improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub buckets: Vec<Bucket>,
    pub repeat_fraction: f64,
    pub total_tokens: usize,
}

impl AnalysisReport {
    pub fn bucket(&self, group: &str, label: &str) -> Option<&Bucket> {
        self.buckets.iter().find(|b| b.group == group && b.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,label,count,mean_improvement\n");
        for b in &self.buckets {
            let _ = writeln!(s, "{},{},{},{:.6}", b.group, b.label, b.count, b.mean_improvement);
        }
        let _ = writeln!(s, "summary,repeat_fraction,{},{:.6}", self.total_tokens, self.repeat_fraction);
        s
    }
}

/// Buckets per-token NLL improvements by relative position in the document
/// (deciles), by log2 corpus frequency of the token, and by occurrence index
/// within the document (first, 2nd, 3rd, 4th or later).
///
/// `frequencies` are token counts from the training split; tokens never seen
/// there fall in bin 0.
pub fn analyze(baseline: &[Vec<f64>], fwl: &[Vec<f64>], corpus: &Corpus, frequencies: &[u64]) -> Result<AnalysisReport> {
    if baseline.len() != corpus.documents.len() || fwl.len() != corpus.documents.len() {
        return Err(FwlError::Alignment(format!(
            "{} baseline and {} fwl documents for a corpus of {}",
            baseline.len(),
            fwl.len(),
            corpus.documents.len()
        )));
    }
    // (group, label) -> (sort key, count, sum)
    let mut acc: BTreeMap<(u8, i64, String), (usize, f64)> = BTreeMap::new();
    let mut add = |group: u8, key: i64, label: String, delta: f64| {
        let e = acc.entry((group, key, label)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += delta;
    };
    let mut total = 0usize;
    let mut repeats = 0usize;
    for (d, doc) in corpus.documents.iter().enumerate() {
        if baseline[d].len() != doc.len() || fwl[d].len() != doc.len() {
            return Err(FwlError::Alignment(format!(
                "document {d}: {} tokens but {} / {} scores",
                doc.len(),
                baseline[d].len(),
                fwl[d].len()
            )));
        }
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        for (t, &tok) in doc.iter().enumerate() {
            let delta = baseline[d][t] - fwl[d][t];
            let decile = (10 * t / doc.len()) as i64;
            add(0, decile, format!("decile-{decile}"), delta);

            let f = frequencies.get(tok).copied().unwrap_or(0);
            let bin = if f == 0 { 0 } else { 64 - f.leading_zeros() as i64 };
            add(1, bin, format!("log2freq-{bin}"), delta);

            let n = seen.entry(tok).or_insert(0);
            *n += 1;
            let label = match *n {
                1 => "first".to_string(),
                2 => "repeat-2".to_string(),
                3 => "repeat-3".to_string(),
                _ => "repeat-4+".to_string(),
            };
            add(2, (*n).min(4) as i64, label, delta);
            if *n > 1 {
                repeats += 1;
                add(3, 1, "repeat".to_string(), delta);
            } else {
                add(3, 0, "first".to_string(), delta);
            }
            total += 1;
        }
    }
    let groups = ["position", "frequency", "occurrence", "repeat"];
    let buckets = acc
        .into_iter()
        .map(|((g, _, label), (count, sum))| Bucket {
            group: groups[g as usize].to_string(),
            label,
            count,
            mean_improvement: sum / count as f64,
        })
        .collect();
    Ok(AnalysisReport {
        buckets,
        repeat_fraction: repeats as f64 / total.max(1) as f64,
        total_tokens: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenizerKind;

    fn corpus() -> Corpus {
        Corpus::from_text("a b a c a\n\nb b c", TokenizerKind::Word, None).unwrap()
    }

    #[test]
    fn identical_streams_give_zero_buckets() {
        let c = corpus();
        let s: Vec<Vec<f64>> = c.documents.iter().map(|d| vec![1.5; d.len()]).collect();
        let r = analyze(&s, &s, &c, &c.frequencies()).unwrap();
        assert!(r.buckets.iter().all(|b| b.mean_improvement == 0.0));
    }

    #[test]
    fn buckets_partition_tokens() {
        let c = corpus();
        let base: Vec<Vec<f64>> = c.documents.iter().map(|d| vec![2.0; d.len()]).collect();
        let fwl: Vec<Vec<f64>> = c.documents.iter().map(|d| (0..d.len()).map(|i| i as f64 * 0.1).collect()).collect();
        let r = analyze(&base, &fwl, &c, &c.frequencies()).unwrap();
        for g in ["position", "frequency", "occurrence", "repeat"] {
            let n: usize = r.buckets.iter().filter(|b| b.group == g).map(|b| b.count).sum();
            assert_eq!(n, 8, "{g}");
        }
        // a b a c a | b b c: repeats are a, a, b
        assert_eq!(r.bucket("repeat", "repeat").unwrap().count, 3);
        assert!((r.repeat_fraction - 3.0 / 8.0).abs() < 1e-15);
        assert_eq!(r.bucket("occurrence", "repeat-3").unwrap().count, 1);
    }

    #[test]
    fn misaligned_streams_are_rejected() {
        let c = corpus();
        let s: Vec<Vec<f64>> = c.documents.iter().map(|d| vec![0.0; d.len()]).collect();
        let mut short = s.clone();
        short[1].pop();
        assert!(matches!(analyze(&s, &short, &c, &[]), Err(FwlError::Alignment(_))));
        assert!(matches!(analyze(&s[..1], &s, &c, &[]), Err(FwlError::Alignment(_))));
    }
}
