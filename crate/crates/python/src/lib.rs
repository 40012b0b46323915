//! Python bindings: checkpoints, corpora, scoring variants, generation and
//! the head-level fast pass with its sequential reference.

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fwl::backbone::BackboneConfig;
use fwl::checkpoint::Checkpoint as CoreCheckpoint;
use fwl::corpus::{generate_entity_corpus, Corpus as CoreCorpus, EntityCorpusConfig, TokenizerKind};
use fwl::harness::{self, GenerateOptions, ScoreOptions, ScoreResult, Variant};
use fwl::layer::{self, FastMask, StepSizes};
use fwl::training::{fit, FitOutput, Model, TrainConfig};
use fwl::{FwlError, Matrix, ParamSet};

fn err(e: FwlError) -> PyErr {
    match e {
        FwlError::Io { .. } => PyOSError::new_err(e.to_string()),
        FwlError::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        FwlError::State(_) | FwlError::Alignment(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> PyResult<T> {
    s.parse().map_err(|_| PyValueError::new_err(format!("invalid {what}: {s:?}")))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix must have at least one row"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(Matrix::from_rows(&rows))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows_iter().map(<[f64]>::to_vec).collect()
}

fn result_dict<'py>(py: Python<'py>, r: &ScoreResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("perplexity", r.perplexity)?;
    d.set_item("mean_nll", r.mean_nll)?;
    d.set_item("tokens", r.tokens)?;
    d.set_item("tokens_per_sec", r.tokens_per_sec())?;
    Ok(d)
}

/// Tokenized documents.
#[pyclass(module = "fwl_py", skip_from_py_object)]
#[derive(Clone)]
struct Corpus {
    inner: CoreCorpus,
}

#[pymethods]
impl Corpus {
    /// Documents are separated by blank lines; `tokenizer` is "char" or "word".
    #[staticmethod]
    #[pyo3(signature = (text, tokenizer = "char"))]
    fn from_text(text: &str, tokenizer: &str) -> PyResult<Self> {
        let kind: TokenizerKind = parse(tokenizer, "tokenizer")?;
        Ok(Corpus {
            inner: CoreCorpus::from_text(text, kind, None).map_err(err)?,
        })
    }

    #[getter]
    fn num_documents(&self) -> usize {
        self.inner.documents.len()
    }

    #[getter]
    fn num_tokens(&self) -> usize {
        self.inner.num_tokens()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.tokenizer.vocab_size()
    }

    /// Fraction of tokens already seen earlier in the same document.
    fn repeat_fraction(&self) -> f64 {
        self.inner.repeat_fraction()
    }

    fn documents(&self) -> Vec<Vec<usize>> {
        self.inner.documents.clone()
    }
}

/// Synthetic corpus of documents that reuse a few rare names.
#[pyfunction]
#[pyo3(signature = (n_docs = 200, seed = 0, pool_size = 200, names_per_doc = 4, sentences_per_doc = 24, filler_prob = 0.3))]
fn entity_corpus(
    n_docs: usize,
    seed: u64,
    pool_size: usize,
    names_per_doc: usize,
    sentences_per_doc: usize,
    filler_prob: f64,
) -> PyResult<String> {
    generate_entity_corpus(&EntityCorpusConfig {
        n_docs,
        pool_size,
        names_per_doc,
        sentences_per_doc,
        filler_prob,
        seed,
    })
    .map_err(err)
}

/// A trained (or freshly initialized) model with its tokenizer and config.
#[pyclass(module = "fwl_py", skip_from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

impl Checkpoint {
    fn corpus(&self, text: &str) -> PyResult<CoreCorpus> {
        let tok = self
            .inner
            .tokenizer
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("checkpoint has no tokenizer"))?;
        CoreCorpus::from_text(text, tok.kind, Some(tok)).map_err(err)
    }
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: CoreCheckpoint::load(path.as_ref()).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: CoreCheckpoint::from_bytes(data).map_err(err)?,
        })
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    /// Trains a model on `text`.
    ///
    /// `config` is a JSON object of training settings (field names as in the
    /// CLI's `train` section); architecture sizes are keyword arguments.
    #[staticmethod]
    #[pyo3(signature = (text, config = None, tokenizer = "word", dev_text = None, out_dir = None,
                        d_model = 32, n_layers = 2, n_heads = 2, d_ff = 64, memory_len = 16, d_hidden = 64))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        text: &str,
        config: Option<&str>,
        tokenizer: &str,
        dev_text: Option<&str>,
        out_dir: Option<&str>,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ff: usize,
        memory_len: usize,
        d_hidden: usize,
    ) -> PyResult<Self> {
        let train: TrainConfig = match config {
            Some(c) => serde_json::from_str(c).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
            None => TrainConfig::default(),
        };
        let kind: TokenizerKind = parse(tokenizer, "tokenizer")?;
        let corpus = CoreCorpus::from_text(text, kind, None).map_err(err)?;
        let dev = dev_text
            .map(|t| CoreCorpus::from_text(t, kind, Some(&corpus.tokenizer)))
            .transpose()
            .map_err(err)?;
        let bb = BackboneConfig {
            vocab_size: corpus.tokenizer.vocab_size(),
            d_model,
            n_layers,
            n_heads,
            d_ff,
            max_seq_len: train.seq_len,
            memory_len,
            seed: train.seed,
        };
        let model = Model::new(&bb, d_hidden, train.mask).map_err(err)?;
        let start = CoreCheckpoint::fresh(model, train, Some(corpus.tokenizer.clone()));
        let out = match out_dir {
            Some(d) => FitOutput::in_dir(d),
            None => FitOutput::default(),
        };
        let outcome = py.detach(|| fit(start, &corpus, dev.as_ref(), &out)).map_err(err)?;
        Ok(Checkpoint {
            inner: outcome.checkpoint,
        })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.model.num_params()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.model.vocab_size()
    }

    /// Learned step sizes in the order U, a, W, b, ln_gain, ln_bias, E, c.
    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.inner.model.steps.alpha.to_vec()
    }

    #[getter]
    fn gammas(&self) -> Vec<f64> {
        layer::HeadTensor::ALL
            .iter()
            .map(|&t| self.inner.model.decays.gamma(t))
            .collect()
    }

    #[getter]
    fn mask(&self) -> String {
        self.inner.model.steps.mask.to_string()
    }

    /// Perplexity of `text` under a variant: baseline, fwl, test-time-only or bias-only.
    #[pyo3(signature = (text, variant = "fwl", global_alpha = 0.0))]
    fn score<'py>(&self, py: Python<'py>, text: &str, variant: &str, global_alpha: f64) -> PyResult<Bound<'py, PyDict>> {
        let variant: Variant = parse(variant, "variant")?;
        let corpus = self.corpus(text)?;
        let opts = ScoreOptions {
            global_alpha,
            ..Default::default()
        };
        let r = py
            .detach(|| harness::score(&self.inner, &corpus, variant, &opts))
            .map_err(err)?;
        let d = result_dict(py, &r)?;
        // one list of per-token losses per document
    d.set_item("nll", r.nll)?;
        Ok(d)
    }

    /// Best test-time-only step size over `grid` and its perplexity.
    fn tune_global_step(&self, py: Python<'_>, text: &str, grid: Vec<f64>) -> PyResult<(f64, f64)> {
        let corpus = self.corpus(text)?;
        py.detach(|| harness::tune_global_step(&self.inner, &corpus, &grid, &ScoreOptions::default()))
            .map_err(err)
    }

    #[pyo3(signature = (text, step, chunk_len = None))]
    fn dynamic_evaluate<'py>(
        &self,
        py: Python<'py>,
        text: &str,
        step: f64,
        chunk_len: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let corpus = self.corpus(text)?;
        let chunk = chunk_len.unwrap_or(self.inner.train.seq_len.min(self.inner.model.config().max_seq_len));
        let r = py
            .detach(|| harness::dynamic_evaluate(&self.inner, &corpus, step, chunk))
            .map_err(err)?;
        result_dict(py, &r)
    }

    /// Samples `n_tokens` after `prompt`; returns (continuation, per-token losses).
    #[pyo3(signature = (prompt, n_tokens = 50, temperature = 1.0, seed = 0, variant = "fwl", global_alpha = 0.0))]
    fn generate(
        &self,
        prompt: &str,
        n_tokens: usize,
        temperature: f64,
        seed: u64,
        variant: &str,
        global_alpha: f64,
    ) -> PyResult<(String, Vec<f64>)> {
        let opts = GenerateOptions {
            n_tokens,
            temperature,
            seed,
            variant: parse(variant, "variant")?,
            global_alpha,
        };
        let g = harness::generate(&self.inner, prompt, &opts).map_err(err)?;
        Ok((g.text, g.losses))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.model.config();
        format!(
            "Checkpoint(step={}, params={}, d_model={}, layers={}, vocab={}, mask={})",
            self.inner.step,
            self.inner.model.num_params(),
            c.d_model,
            c.n_layers,
            c.vocab_size,
            self.inner.model.steps.mask
        )
    }
}

/// Parameters of the output head alone, for experimenting with the fast pass.
#[pyclass(module = "fwl_py", skip_from_py_object)]
#[derive(Clone)]
struct HeadParams {
    inner: layer::HeadParams,
}

impl HeadParams {
    fn steps(&self, alpha: f64, mask: &str) -> PyResult<StepSizes> {
        Ok(StepSizes::uniform(parse::<FastMask>(mask, "mask")?, alpha))
    }

    fn check_targets(&self, h: &Matrix, targets: &[usize]) -> PyResult<()> {
        if h.rows() != targets.len() {
            return Err(PyValueError::new_err("need one target per row of h"));
        }
        Ok(())
    }
}

#[pymethods]
impl HeadParams {
    #[new]
    #[pyo3(signature = (d_model, d_hidden, vocab_size, seed = 0))]
    fn new(d_model: usize, d_hidden: usize, vocab_size: usize, seed: u64) -> Self {
        HeadParams {
            inner: layer::HeadParams::init(d_model, d_hidden, vocab_size, seed),
        }
    }

    /// Per-position losses with the slow weights.
    fn slow_losses(&self, h: Vec<Vec<f64>>, targets: Vec<usize>) -> PyResult<Vec<f64>> {
        let h = matrix(h)?;
        self.check_targets(&h, &targets)?;
        Ok(layer::slow_forward(&self.inner, &h, &targets).map_err(err)?.1)
    }

    /// Per-position losses after fast updates from all earlier positions.
    #[pyo3(signature = (h, targets, alpha, mask = "all", chunk_size = 64))]
    fn fast_losses(&self, h: Vec<Vec<f64>>, targets: Vec<usize>, alpha: f64, mask: &str, chunk_size: usize) -> PyResult<Vec<f64>> {
        let h = matrix(h)?;
        self.check_targets(&h, &targets)?;
        let steps = self.steps(alpha, mask)?;
        let (tape, _) = layer::slow_forward(&self.inner, &h, &targets).map_err(err)?;
        let grads = layer::per_position_grads(&self.inner, &tape, &targets).map_err(err)?;
        let fast = layer::fast_forward(&self.inner, &steps, &tape, &grads, None, chunk_size).map_err(err)?;
        Ok(fast.losses)
    }

    /// Same quantity as `fast_losses`, one position at a time with explicit weights.
    #[pyo3(signature = (h, targets, alpha, mask = "all"))]
    fn reference_fast_losses(&self, h: Vec<Vec<f64>>, targets: Vec<usize>, alpha: f64, mask: &str) -> PyResult<Vec<f64>> {
        let h = matrix(h)?;
        self.check_targets(&h, &targets)?;
        let steps = self.steps(alpha, mask)?;
        fwl::oracle::sequential_fast_forward(&self.inner, &steps, &h, &targets).map_err(err)
    }

    /// Logits for a single context vector.
    fn logits(&self, h: Vec<f64>) -> PyResult<Vec<f64>> {
        if h.len() != self.inner.d_model() {
            return Err(PyValueError::new_err("context vector has the wrong length"));
        }
        Ok(layer::head_logits(&self.inner, &h))
    }
}

/// Causal linear attention `O_t = q_t · Σ_{i<t} k_iᵀ v_i`; `chunk_size` selects the chunked kernel.
#[pyfunction]
#[pyo3(signature = (q, k, v, chunk_size = None))]
fn causal_linear_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    chunk_size: Option<usize>,
) -> PyResult<Vec<Vec<f64>>> {
    let (q, k, v) = (matrix(q)?, matrix(k)?, matrix(v)?);
    let (out, _) = match chunk_size {
        Some(c) => fwl::linear_attention::chunked_causal_linear_attention(&q, &k, &v, c, None),
        None => fwl::linear_attention::causal_linear_attention(&q, &k, &v, None),
    }
    .map_err(err)?;
    Ok(rows(&out))
}

/// Runs the built-in self-checks; returns (name, passed, max error, tolerance) tuples.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn verify(py: Python<'_>, seed: u64) -> Vec<(String, bool, f64, f64)> {
    py.detach(|| harness::verify(seed))
        .into_iter()
        .map(|c| (c.name, c.pass, c.worst, c.tolerance))
        .collect()
}

#[pymodule]
fn fwl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<HeadParams>()?;
    m.add_function(wrap_pyfunction!(entity_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(causal_linear_attention, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
