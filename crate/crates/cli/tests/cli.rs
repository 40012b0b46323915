use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fwl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwl"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fwl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(s: &str) -> Value {
    serde_json::from_str(s.trim().lines().last().unwrap()).unwrap()
}

const TINY: &[&str] = &[
    "--tokenizer", "word", "--seq-len", "8", "--segments", "2", "--batch-size", "2", "--warmup-steps", "2",
    "--d-model", "8", "--d-hidden", "12", "--d-ff", "16", "--memory-len", "4", "--n-layers", "1",
];

/// Writes train/dev corpora and trains a tiny model into `out`.
fn setup(dir: &Path, out: &str, steps: &str, extra: &[&str]) {
    if !dir.join("train.txt").exists() {
        ok(dir, &["entity-corpus", "--n-docs", "20", "--sentences-per-doc", "10", "--seed", "1", "--out", "train.txt"]);
        ok(dir, &["entity-corpus", "--n-docs", "4", "--sentences-per-doc", "10", "--seed", "2", "--out", "dev.txt"]);
    }
    let mut args = vec!["train", "--train", "train.txt", "--out", out, "--steps", steps, "--seed", "5"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    if !extra.contains(&"--eval-every") {
        args.extend_from_slice(&["--eval-every", "0"]);
    }
    ok(dir, &args);
}

/// Training-step records, without wall-clock time.
fn metrics(dir: &Path, run: &str) -> Vec<Value> {
    fs::read_to_string(dir.join(run).join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .filter(|v| v.get("grad_norm").is_some())
        .collect()
}

#[test]
fn entity_corpus_is_seeded() {
    let dir = TempDir::new().unwrap();
    let a = ok(dir.path(), &["entity-corpus", "--n-docs", "3", "--seed", "4"]);
    let b = ok(dir.path(), &["entity-corpus", "--n-docs", "3", "--seed", "4"]);
    let c = ok(dir.path(), &["entity-corpus", "--n-docs", "3", "--seed", "5"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.split("\n\n").count(), 3);
}

#[test]
fn training_is_repeatable_and_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let dev = ["--dev", "dev.txt", "--eval-every", "2"];
    setup(d, "a", "4", &dev);
    setup(d, "b", "4", &dev);
    for f in ["final.ckpt", "best.ckpt", "metrics.jsonl", "vocab.txt"] {
        assert!(d.join("a").join(f).exists(), "{f}");
    }
    let m = metrics(d, "a");
    assert_eq!(m.len(), 4);
    for key in ["step", "loss", "ppl", "grad_norm", "alphas"] {
        assert!(m[0].get(key).is_some(), "{key}");
    }
    assert_eq!(m, metrics(d, "b"));
    assert_eq!(
        fs::read(d.join("a/final.ckpt")).unwrap(),
        fs::read(d.join("b/final.ckpt")).unwrap()
    );
}

#[test]
fn resumed_training_matches_an_unbroken_run() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    setup(d, "full", "6", &[]);
    setup(d, "half", "3", &[]);
    ok(d, &["train", "--train", "train.txt", "--out", "half", "--resume", "half/final.ckpt", "--steps", "6"]);
    let full = metrics(d, "full");
    let resumed = metrics(d, "half");
    assert_eq!(full.len(), 6);
    for (a, b) in full.iter().zip(&resumed) {
        assert_eq!(a["step"], b["step"]);
        let (x, y) = (a["loss"].as_f64().unwrap(), b["loss"].as_f64().unwrap());
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), r#"{"train": {"steps": 5, "lr": 0.01}, "model": {"d_hidden": 10}}"#).unwrap();
    setup(d, "run", "3", &["--config", "cfg.json"]);
    assert_eq!(metrics(d, "run").len(), 3);
    let out = ok(d, &["score", "--checkpoint", "run/final.ckpt", "--corpus", "dev.txt"]);
    assert!(json(&out)["perplexity"].as_f64().unwrap() > 1.0);
}

#[test]
fn scoring_variants_and_identities() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    setup(d, "run", "3", &[]);
    let ckpt = "run/final.ckpt";
    let score = |variant: &str, extra: &[&str]| {
        let mut args = vec!["score", "--checkpoint", ckpt, "--corpus", "dev.txt", "--variant", variant];
        args.extend_from_slice(extra);
        json(&ok(d, &args))
    };
    let base = score("baseline", &[]);
    let tto0 = score("test-time-only", &["--global-alpha", "0"]);
    assert_eq!(base["perplexity"], tto0["perplexity"]);
    let fast = score("fwl", &["--nll-out", "nll.csv"]);
    assert_eq!(fast["tokens"], base["tokens"]);
    let rows = fs::read_to_string(d.join("nll.csv")).unwrap().lines().count();
    assert_eq!(rows as u64, base["tokens"].as_u64().unwrap() + 1);
    let tuned = score("test-time-only", &["--tune-grid", "0"]);
    assert_eq!(tuned["tuned_alpha"].as_f64(), Some(0.0));

    let dyn0 = json(&ok(d, &["dyneval", "--checkpoint", ckpt, "--corpus", "dev.txt", "--step", "0"]));
    assert_eq!(dyn0["perplexity"], base["perplexity"]);
}

#[test]
fn generation_is_seeded() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    setup(d, "run", "2", &[]);
    let args = ["generate", "--checkpoint", "run/final.ckpt", "--prompt", "the", "--n-tokens", "10", "--seed", "3"];
    let a = ok(d, &args);
    assert_eq!(a, ok(d, &args));
    assert!(a.starts_with("the "));
    let greedy = ["generate", "--checkpoint", "run/final.ckpt", "--n-tokens", "6", "--temperature", "0"];
    assert_eq!(ok(d, &greedy), ok(d, &greedy));
}

#[test]
fn ablate_analyze_and_bench_run() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    setup(d, "slow", "3", &["--mode", "slow-only"]);
    setup(d, "fast", "3", &[]);
    setup(d, "bias", "3", &["--mask", "bias-only"]);
    let table = ok(
        d,
        &[
            "ablate", "--corpus", "dev.txt", "--slow-only", "slow/final.ckpt", "--fwl", "fast/final.ckpt",
            "--bias-only", "bias/final.ckpt", "--tune", "dev.txt", "--alpha-grid", "0,0.01", "--dyneval-grid",
            "0,0.01", "--out", "table.csv",
        ],
    );
    for row in ["No FWL", "FWL", "Test-time only", "Bias only", "Dynamic evaluation"] {
        assert!(table.contains(row), "{row}");
    }
    assert_eq!(fs::read_to_string(d.join("table.csv")).unwrap().lines().count(), 6);

    let csv = ok(
        d,
        &["analyze", "--baseline", "slow/final.ckpt", "--fwl", "fast/final.ckpt", "--corpus", "dev.txt", "--train-corpus", "train.txt"],
    );
    assert!(csv.starts_with("group,label,count,mean_improvement"));
    assert!(csv.contains("repeat,repeat,"));

    let bench = json(&ok(d, &["bench", "--checkpoint", "fast/final.ckpt", "--corpus", "dev.txt", "--json"]));
    assert!(bench["flops"]["fast_pass"].as_u64().unwrap() > 0);
}

#[test]
fn verify_passes() {
    let dir = TempDir::new().unwrap();
    let out = ok(dir.path(), &["verify", "--seed", "2"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("[PASS]")).count(), 4);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| fwl(d, args).status.code().unwrap();
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["score", "--checkpoint", "x.ckpt"]), 1);
    assert_eq!(code(&["train", "--train", "missing.txt", "--out", "o", "--mode", "bogus"]), 1);
    assert_eq!(code(&["score", "--checkpoint", "missing.ckpt", "--corpus", "missing.txt"]), 2);
    fs::write(d.join("bad.ckpt"), b"not a checkpoint").unwrap();
    fs::write(d.join("c.txt"), "a b c").unwrap();
    assert_eq!(code(&["score", "--checkpoint", "bad.ckpt", "--corpus", "c.txt"]), 2);
    fs::write(d.join("bad.json"), "{ nope").unwrap();
    assert_eq!(code(&["train", "--train", "c.txt", "--out", "o", "--config", "bad.json"]), 1);
    assert_eq!(code(&["train", "--train", "c.txt", "--out", "o", "--lr", "-1"]), 1);
    assert_eq!(code(&["entity-corpus", "--names-per-doc", "1"]), 1);
    assert_eq!(code(&["--help"]), 0);
}
