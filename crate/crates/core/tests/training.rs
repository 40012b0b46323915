use fwl::backbone::BackboneConfig;
use fwl::checkpoint::Checkpoint;
use fwl::corpus::{generate_entity_corpus, Corpus, EntityCorpusConfig, TokenizerKind};
use fwl::layer::FastMask;
use fwl::training::{fit, FitOutput, Mode, Model, TrainConfig};
use fwl::{FwlError, ParamSet};

fn corpus(n_docs: usize, seed: u64) -> Corpus {
    let text = generate_entity_corpus(&EntityCorpusConfig {
        n_docs,
        seed,
        ..Default::default()
    })
    .unwrap();
    Corpus::from_text(&text, TokenizerKind::Word, None).unwrap()
}

fn start(corpus: &Corpus, mode: Mode, steps: usize) -> Checkpoint {
    let bb = BackboneConfig {
        vocab_size: corpus.tokenizer.vocab_size(),
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        memory_len: 8,
        seed: 1,
    };
    let train = TrainConfig {
        lr: 1e-2,
        batch_size: 4,
        seq_len: 16,
        segments: 2,
        steps,
        warmup_steps: 5,
        mode,
        eval_every: 5,
        eval_windows: 4,
        seed: 3,
        ..Default::default()
    };
    let model = Model::new(&bb, 24, FastMask::ALL).unwrap();
    Checkpoint::fresh(model, train, Some(corpus.tokenizer.clone()))
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = corpus(3, 0);
    let dir = tempfile::tempdir().unwrap();
    let out = fit(start(&c, Mode::Full, 3), &c, Some(&c), &FitOutput::in_dir(dir.path())).unwrap();
    let path = dir.path().join("final.ckpt");
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    assert!(dir.path().join("best.ckpt").exists());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "ppl", "grad_norm", "alphas", "wall_ms"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let c = corpus(2, 0);
    let bytes = start(&c, Mode::Full, 1).to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(FwlError::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(FwlError::Format(_))));
    assert!(matches!(
        Checkpoint::load(std::path::Path::new("/nonexistent/x.ckpt")),
        Err(FwlError::Io { .. })
    ));
}

#[test]
fn training_reduces_loss() {
    let c = corpus(30, 1);
    let out = fit(start(&c, Mode::Full, 40), &c, None, &FitOutput::default()).unwrap();
    let first = out.metrics[..5].iter().map(|m| m.loss).sum::<f64>() / 5.0;
    let last = out.metrics[35..].iter().map(|m| m.loss).sum::<f64>() / 5.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn finetune_freezes_backbone() {
    let c = corpus(4, 2);
    let base = fit(start(&c, Mode::SlowOnly, 4), &c, None, &FitOutput::default()).unwrap().checkpoint;
    let mut ft = base.clone();
    ft.train.mode = Mode::FwlFinetune;
    ft.train.steps = 4;
    ft.optimizer = None;
    ft.step = 0;
    let out = fit(ft, &c, None, &FitOutput::default()).unwrap().checkpoint;
    assert_eq!(out.model.backbone, base.model.backbone);
    assert_ne!(out.model.head, base.model.head);
    assert_ne!(out.model.steps.alpha, base.model.steps.alpha);
}

#[test]
fn slow_only_leaves_step_sizes_alone() {
    let c = corpus(4, 2);
    let init = start(&c, Mode::SlowOnly, 4);
    let out = fit(init.clone(), &c, None, &FitOutput::default()).unwrap().checkpoint;
    assert_eq!(out.model.steps, init.model.steps);
    assert_eq!(out.model.decays, init.model.decays);
}

#[test]
fn resume_and_repeat_are_deterministic() {
    let c = corpus(6, 3);
    let full = fit(start(&c, Mode::Full, 8), &c, Some(&c), &FitOutput::default()).unwrap();
    let again = fit(start(&c, Mode::Full, 8), &c, Some(&c), &FitOutput::default()).unwrap();
    let strip = |ms: &[fwl::training::StepMetrics]| ms.iter().map(|m| (m.loss, m.grad_norm, m.alphas)).collect::<Vec<_>>();
    assert_eq!(strip(&full.metrics), strip(&again.metrics));
    assert_eq!(full.checkpoint.model.flatten(), again.checkpoint.model.flatten());

    let dir = tempfile::tempdir().unwrap();
    fit(start(&c, Mode::Full, 4), &c, None, &FitOutput::in_dir(dir.path())).unwrap();
    let mut half = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    half.train.steps = 8;
    let resumed = fit(half, &c, None, &FitOutput::default()).unwrap();
    for (a, b) in full.metrics[4..].iter().zip(&resumed.metrics) {
        assert_eq!(a.step, b.step);
        assert!((a.loss - b.loss).abs() < 1e-10);
    }
    assert_eq!(full.checkpoint.model, resumed.checkpoint.model);
}

#[test]
fn vocabulary_mismatch_is_a_config_error() {
    let c = corpus(2, 0);
    let other = Corpus::from_text("a b c", TokenizerKind::Word, None).unwrap();
    let err = fit(start(&c, Mode::Full, 1), &other, None, &FitOutput::default()).unwrap_err();
    assert!(matches!(err, FwlError::Config { .. }));
}
