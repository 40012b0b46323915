//! `fwl`: train, score, generate with and benchmark fast-weight language models.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fwl::backbone::BackboneConfig;
use fwl::checkpoint::Checkpoint;
use fwl::corpus::{generate_entity_corpus, Corpus, EntityCorpusConfig, Tokenizer, TokenizerKind};
use fwl::harness::{
    ablate, analyze, bench, dynamic_evaluate, generate, score, tune_global_step, verify, AblationInputs,
    AblationSettings, GenerateOptions, ScoreOptions, ScoreResult, Variant,
};
use fwl::layer::FastMask;
use fwl::training::{fit, FitOutput, Mode, Model, TrainConfig};
use fwl::FwlError;

#[derive(Parser)]
#[command(name = "fwl", version, about = "Fast weight layer language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a model and write checkpoints plus metrics.jsonl to --out.
    Train(TrainArgs),
    /// Perplexity of one variant over a corpus.
    Score(ScoreArgs),
    /// Sample text, updating fast weights as tokens are produced.
    Generate(GenerateArgs),
    /// Chunked dynamic evaluation (test-time SGD on all weights).
    Dyneval(DynevalArgs),
    /// Score the ablation grid and print the table.
    Ablate(AblateArgs),
    /// Bucket per-token NLL improvements of a fast-weight model over a baseline.
    Analyze(AnalyzeArgs),
    /// Analytic FLOPs and measured throughput.
    Bench(BenchArgs),
    /// Check the fast pass, kernels and gradients against their references.
    Verify(VerifyArgs),
    /// Write the synthetic entity corpus.
    EntityCorpus(EntityArgs),
}

/// Architecture settings that are not part of the training config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct ModelSpec {
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    d_ff: usize,
    /// Defaults to the training `seq_len`.
    max_seq_len: Option<usize>,
    memory_len: usize,
    d_hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: None,
            memory_len: 16,
            d_hidden: 64,
        }
    }
}

/// Layout of a `--config` file; every field is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelSpec,
    train: TrainConfig,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (UTF-8, documents separated by blank lines).
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with `model` and `train` sections; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint (its config is the base; flags still override).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "char")]
    tokenizer: TokenizerKind,
    /// One symbol per line; built from the training corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    opts: TrainFlags,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    memory_len: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// full, slow-only or fwl-finetune.
    #[arg(long)]
    mode: Option<Mode>,
    /// all, none, bias-only, vectors, matrices, or a list such as `E,c`.
    #[arg(long)]
    mask: Option<FastMask>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    first_order: bool,
    #[arg(long)]
    alpha_lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_windows: Option<usize>,
}

macro_rules! apply {
    ($target:expr, $flags:expr, [$($field:ident),*]) => {
        $(if let Some(v) = $flags.$field { $target.$field = v; })*
    };
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        apply!(t, self, [lr, beta1, beta2, eps, weight_decay, batch_size, seq_len, segments, steps,
            warmup_steps, clip_norm, mode, mask, chunk_size, eval_every, eval_windows]);
        if self.first_order {
            t.first_order = true;
        }
        if self.alpha_lr.is_some() {
            t.alpha_lr = self.alpha_lr;
        }
    }
}

impl ModelFlags {
    fn apply(&self, m: &mut ModelSpec) {
        apply!(m, self, [d_model, n_layers, n_heads, d_ff, memory_len, d_hidden]);
        if self.max_seq_len.is_some() {
            m.max_seq_len = self.max_seq_len;
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// baseline, fwl, test-time-only or bias-only.
    #[arg(long, default_value = "fwl")]
    variant: Variant,
    /// Global step size for test-time-only.
    #[arg(long, default_value_t = 0.0)]
    global_alpha: f64,
    /// Tune the test-time-only step over this comma-separated grid first.
    #[arg(long, value_delimiter = ',')]
    tune_grid: Vec<f64>,
    /// Corpus to tune on (defaults to --corpus).
    #[arg(long)]
    tune_corpus: Option<PathBuf>,
    #[command(flatten)]
    scoring: ScoringFlags,
    /// Write per-token NLL as CSV (doc,position,token,nll).
    #[arg(long)]
    nll_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct ScoringFlags {
    /// Segment length; defaults to the checkpoint's.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = fwl::linear_attention::DEFAULT_CHUNK)]
    chunk_size: usize,
}

impl ScoringFlags {
    fn options(&self, global_alpha: f64) -> ScoreOptions {
        ScoreOptions {
            seq_len: self.seq_len,
            chunk_size: self.chunk_size,
            global_alpha,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 100)]
    n_tokens: usize,
    /// 0 picks the most likely token.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value = "fwl")]
    variant: Variant,
    #[arg(long, default_value_t = 0.0)]
    global_alpha: f64,
    /// Print per-token losses and the repeated-4-gram rate to stderr.
    #[arg(long)]
    stats: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DynevalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// Pick the step from this comma-separated grid instead.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    /// Defaults to the checkpoint's segment length.
    #[arg(long)]
    chunk_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Model trained without fast weights.
    #[arg(long)]
    slow_only: Option<PathBuf>,
    #[arg(long)]
    fwl: Option<PathBuf>,
    #[arg(long)]
    bias_only: Option<PathBuf>,
    #[arg(long, default_value_t = 0.003)]
    test_time_alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    dyneval_step: f64,
    #[arg(long)]
    dyneval_chunk: Option<usize>,
    /// Tune the test-time step and dynamic-evaluation step on this corpus.
    #[arg(long)]
    tune: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.0003,0.001,0.003,0.01,0.03,0.1")]
    alpha_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.003,0.01,0.03,0.1,0.3")]
    dyneval_grid: Vec<f64>,
    #[command(flatten)]
    scoring: ScoringFlags,
    /// Write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint scored on the slow path.
    #[arg(long)]
    baseline: PathBuf,
    /// Checkpoint scored with its fast weights.
    #[arg(long)]
    fwl: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Corpus the frequency buckets are counted on (defaults to --corpus).
    #[arg(long)]
    train_corpus: Option<PathBuf>,
    #[command(flatten)]
    scoring: ScoringFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    dyneval_step: f64,
    #[arg(long)]
    json: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EntityArgs {
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n_docs: usize,
    #[arg(long, default_value_t = 200)]
    pool_size: usize,
    #[arg(long, default_value_t = 4)]
    names_per_doc: usize,
    #[arg(long, default_value_t = 24)]
    sentences_per_doc: usize,
    #[arg(long, default_value_t = 0.3)]
    filler_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| FwlError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| FwlError::config("config", format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

/// Reads a corpus with the checkpoint's tokenizer.
fn corpus_for(ckpt: &Checkpoint, path: &Path) -> Result<Corpus> {
    let tok = ckpt
        .tokenizer
        .as_ref()
        .ok_or_else(|| FwlError::config("tokenizer", "checkpoint has no tokenizer"))?;
    Ok(Corpus::ingest(path, tok.kind, Some(tok))?)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| FwlError::io(path, e))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (mut run, resume) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let run = RunConfig {
                train: ckpt.train.clone(),
                ..Default::default()
            };
            (run, Some(ckpt))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(path) = &args.config {
        run = read_json(path)?;
    }
    args.model.apply(&mut run.model);
    args.opts.apply(&mut run.train);
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    run.train.validate()?;

    let start = match resume {
        Some(mut ckpt) => {
            if args.config.is_some() || args.model.d_model.is_some() || args.vocab.is_some() {
                eprintln!("note: model settings come from the resumed checkpoint");
            }
            ckpt.train = run.train.clone();
            ckpt
        }
        None => {
            let tokenizer = match &args.vocab {
                Some(v) => Tokenizer::from_vocab_file(v, args.tokenizer)?,
                None => {
                    let text = fs::read_to_string(&args.train).map_err(|e| FwlError::io(&args.train, e))?;
                    Corpus::from_text(&text, args.tokenizer, None)?.tokenizer
                }
            };
            let m = &run.model;
            let bb = BackboneConfig {
                vocab_size: tokenizer.vocab_size(),
                d_model: m.d_model,
                n_layers: m.n_layers,
                n_heads: m.n_heads,
                d_ff: m.d_ff,
                max_seq_len: m.max_seq_len.unwrap_or(run.train.seq_len),
                memory_len: m.memory_len,
                seed: run.train.seed,
            };
            let model = Model::new(&bb, m.d_hidden, run.train.mask)?;
            Checkpoint::fresh(model, run.train.clone(), Some(tokenizer))
        }
    };
    let tok = start.tokenizer.clone().expect("fresh checkpoints carry a tokenizer");
    let train = Corpus::ingest(&args.train, tok.kind, Some(&tok))?;
    let dev = args.dev.as_ref().map(|p| Corpus::ingest(p, tok.kind, Some(&tok))).transpose()?;
    fs::create_dir_all(&args.out).map_err(|e| FwlError::io(&args.out, e))?;
    tok.write_vocab_file(&args.out.join("vocab.txt"))?;
    let outcome = fit(start, &train, dev.as_ref(), &FitOutput::in_dir(&args.out))?;
    let last = outcome.metrics.last();
    println!(
        "{}",
        serde_json::json!({
            "steps": outcome.checkpoint.step,
            "final_loss": last.map(|m| m.loss),
            "best_dev_loss": outcome.best_dev,
            "parameters": fwl::ParamSet::num_params(&outcome.checkpoint.model),
            "alphas": outcome.checkpoint.model.steps.alpha,
            "out": args.out,
        })
    );
    Ok(())
}

fn score_json(variant: Variant, r: &ScoreResult, extra: serde_json::Value) -> serde_json::Value {
    let mut v = serde_json::json!({
        "variant": variant.to_string(),
        "perplexity": r.perplexity,
        "mean_nll": r.mean_nll,
        "tokens": r.tokens,
        "tokens_per_sec": r.tokens_per_sec(),
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    v
}

fn write_nll(path: &Path, corpus: &Corpus, nll: &[Vec<f64>]) -> Result<()> {
    let mut s = String::from("doc,position,token,nll\n");
    for (d, (doc, losses)) in corpus.documents.iter().zip(nll).enumerate() {
        for (t, (tok, l)) in doc.iter().zip(losses).enumerate() {
            s.push_str(&format!("{d},{t},{tok},{l:.9}\n"));
        }
    }
    write_file(path, &s)
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = corpus_for(&ckpt, &args.corpus)?;
    let mut alpha = args.global_alpha;
    let mut extra = serde_json::json!({});
    if !args.tune_grid.is_empty() {
        let tune = match &args.tune_corpus {
            Some(p) => corpus_for(&ckpt, p)?,
            None => corpus.clone(),
        };
        let (best, ppl) = tune_global_step(&ckpt, &tune, &args.tune_grid, &args.scoring.options(0.0))?;
        alpha = best;
        extra = serde_json::json!({ "tuned_alpha": best, "tune_perplexity": ppl });
    }
    if args.variant == Variant::TestTimeOnly {
        extra["global_alpha"] = serde_json::json!(alpha);
    }
    let r = score(&ckpt, &corpus, args.variant, &args.scoring.options(alpha))?;
    if let Some(p) = &args.nll_out {
        write_nll(p, &corpus, &r.nll)?;
    }
    println!("{}", score_json(args.variant, &r, extra));
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let opts = GenerateOptions {
        n_tokens: args.n_tokens,
        temperature: args.temperature,
        seed: args.seed,
        variant: args.variant,
        global_alpha: args.global_alpha,
    };
    let g = generate(&ckpt, &args.prompt, &opts)?;
    if g.unknown_prompt_symbols > 0 {
        eprintln!("warning: {} prompt symbols are not in the vocabulary", g.unknown_prompt_symbols);
    }
    let sep = match ckpt.tokenizer.as_ref().map(|t| t.kind) {
        Some(TokenizerKind::Word) if !args.prompt.is_empty() => " ",
        _ => "",
    };
    println!("{}{sep}{}", args.prompt, g.text);
    if args.stats {
        let mean = g.losses.iter().sum::<f64>() / g.losses.len().max(1) as f64;
        eprintln!(
            "mean loss {mean:.4}, repeated 4-grams {:.3}",
            fwl::harness::repeat_ngram_rate(&g.tokens, 4)
        );
    }
    Ok(())
}

fn cmd_dyneval(args: DynevalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = corpus_for(&ckpt, &args.corpus)?;
    let chunk = args.chunk_len.unwrap_or(ckpt.train.seq_len.min(ckpt.model.config().max_seq_len));
    let mut grid = if args.grid.is_empty() { vec![args.step] } else { args.grid.clone() };
    grid.sort_by(f64::total_cmp);
    let mut best: Option<(f64, ScoreResult)> = None;
    for step in grid {
        let r = dynamic_evaluate(&ckpt, &corpus, step, chunk)?;
        if best.as_ref().is_none_or(|(_, b)| r.perplexity < b.perplexity) {
            best = Some((step, r));
        }
    }
    let (step, r) = best.expect("grid is non-empty");
    println!(
        "{}",
        serde_json::json!({
            "step": step,
            "chunk_len": chunk,
            "perplexity": r.perplexity,
            "mean_nll": r.mean_nll,
            "tokens": r.tokens,
            "tokens_per_sec": r.tokens_per_sec(),
        })
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let load = |p: &Option<PathBuf>| p.as_deref().map(load_checkpoint).transpose();
    let (slow, fast, bias) = (load(&args.slow_only)?, load(&args.fwl)?, load(&args.bias_only)?);
    let Some(reference) = slow.as_ref().or(fast.as_ref()).or(bias.as_ref()) else {
        bail!(FwlError::config("ablate", "pass at least one checkpoint"));
    };
    let corpus = corpus_for(reference, &args.corpus)?;
    let opts = args.scoring.options(0.0);
    let mut test_time_alpha = args.test_time_alpha;
    let mut dyneval_step = args.dyneval_step;
    let dyneval_chunk = args
        .dyneval_chunk
        .unwrap_or(reference.train.seq_len.min(reference.model.config().max_seq_len));
    if let (Some(tune_path), Some(slow)) = (&args.tune, slow.as_ref()) {
        let tune = corpus_for(slow, tune_path)?;
        test_time_alpha = tune_global_step(slow, &tune, &args.alpha_grid, &opts)?.0;
        let mut best = f64::INFINITY;
        let mut grid = args.dyneval_grid.clone();
        grid.sort_by(f64::total_cmp);
        for s in grid {
            let p = dynamic_evaluate(slow, &tune, s, dyneval_chunk)?.perplexity;
            if p < best {
                best = p;
                dyneval_step = s;
            }
        }
        eprintln!("tuned: test-time alpha {test_time_alpha}, dynamic evaluation step {dyneval_step}");
    }
    let table = ablate(
        AblationInputs {
            slow_only: slow.as_ref(),
            fwl: fast.as_ref(),
            bias_only: bias.as_ref(),
        },
        &corpus,
        &AblationSettings {
            score: opts,
            test_time_alpha,
            dyneval_step,
            dyneval_chunk,
        },
    )?;
    print!("{}", table.to_text());
    if let Some(p) = &args.out {
        write_file(p, &table.to_csv())?;
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let base_ckpt = load_checkpoint(&args.baseline)?;
    let fwl_ckpt = load_checkpoint(&args.fwl)?;
    let corpus = corpus_for(&base_ckpt, &args.corpus)?;
    let freq_corpus = match &args.train_corpus {
        Some(p) => corpus_for(&base_ckpt, p)?,
        None => corpus.clone(),
    };
    let opts = args.scoring.options(0.0);
    let base = score(&base_ckpt, &corpus, Variant::Baseline, &opts)?;
    let fast = score(&fwl_ckpt, &corpus, Variant::Fwl, &opts)?;
    let report = analyze(&base.nll, &fast.nll, &corpus, &freq_corpus.frequencies())?;
    let csv = report.to_csv();
    match &args.out {
        Some(p) => write_file(p, &csv)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "baseline ppl {:.4}, fwl ppl {:.4}, repeat fraction {:.3}",
        base.perplexity, fast.perplexity, report.repeat_fraction
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = corpus_for(&ckpt, &args.corpus)?;
    let report = bench(&ckpt, &corpus, args.dyneval_step)?;
    if args.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let checks = verify(args.seed);
    for c in &checks {
        println!(
            "[{}] {:<50} max err {:.2e} (tol {:.0e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.tolerance
        );
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        bail!(FwlError::Numerical(format!("{failed} verification checks failed")));
    }
    Ok(())
}

fn cmd_entity(args: EntityArgs) -> Result<()> {
    let text = generate_entity_corpus(&EntityCorpusConfig {
        n_docs: args.n_docs,
        pool_size: args.pool_size,
        names_per_doc: args.names_per_doc,
        sentences_per_doc: args.sentences_per_doc,
        filler_prob: args.filler_prob,
        seed: args.seed,
    })?;
    match &args.out {
        Some(p) => write_file(p, &text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<FwlError>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Dyneval(a) => cmd_dyneval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Verify(a) => cmd_verify(a),
        Command::EntityCorpus(a) => cmd_entity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
