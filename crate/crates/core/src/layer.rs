//! The fast weight layer.
//!
//! Head: `u = LayerNorm(ReLU²(h U + a) W + b)`, `logits = u E + c`.
//!
//! A slow pass with θ yields per-position losses `L_t`. Because `L_t` only
//! depends on `h_t`, one batched backward pass gives every per-position
//! gradient. For a matmul weight the per-position gradient is the outer
//! product `keyᵀ · value` of the layer input and the upstream gradient, so the
//! fast pass
//!
//! ```text
//! o'_t = v'_t (W − α_W Σ_{i<t} v_iᵀ g_i) = v'_t W − α_W Σ_{i<t} (v'_t · v_i) g_i
//! ```
//!
//! is a strictly causal linear attention with queries from the fast pass, keys
//! from the slow pass and gradient rows as values. Vector parameters use an
//! exclusive cumsum of their gradient rows instead.
//!
//! Outer-loop gradients of `Σ L'_t` are obtained by differentiating this
//! explicit composition, including the path through the per-position
//! gradients themselves (second order).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FwlError, Result};
use crate::linear_attention::{
    chunked_causal_linear_attention, linear_attention_backward, KVState, DEFAULT_CHUNK,
};
use crate::numerics::{
    dot, exclusive_cumsum_rows, mm, mm_nt, mm_tn, normalize, normalize_bwd, relu2_scalar,
    reverse_exclusive_cumsum_rows, softmax, softmax_xent, vecmat, LayerNormRows, Matrix, Vector,
    LN_EPS,
};
use crate::params::ParamSet;

/// The eight tensors of the head, in parameter order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadTensor {
    U,
    A,
    W,
    B,
    LnGain,
    LnBias,
    E,
    C,
}

impl HeadTensor {
    pub const ALL: [HeadTensor; 8] = [
        HeadTensor::U,
        HeadTensor::A,
        HeadTensor::W,
        HeadTensor::B,
        HeadTensor::LnGain,
        HeadTensor::LnBias,
        HeadTensor::E,
        HeadTensor::C,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadTensor::U => "U",
            HeadTensor::A => "a",
            HeadTensor::W => "W",
            HeadTensor::B => "b",
            HeadTensor::LnGain => "ln_gain",
            HeadTensor::LnBias => "ln_bias",
            HeadTensor::E => "E",
            HeadTensor::C => "c",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        HeadTensor::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn is_matrix(self) -> bool {
        matches!(self, HeadTensor::U | HeadTensor::W | HeadTensor::E)
    }
}

/// Which head tensors receive fast-weight updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FastMask(u8);

impl TryFrom<String> for FastMask {
    type Error = FwlError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FastMask> for String {
    fn from(m: FastMask) -> String {
        m.to_string()
    }
}

impl Default for FastMask {
    fn default() -> Self {
        FastMask::ALL
    }
}

impl FastMask {
    pub const NONE: FastMask = FastMask(0);
    pub const ALL: FastMask = FastMask(0xff);
    pub const BIAS_ONLY: FastMask = FastMask(1 << 7);
    pub const VECTORS: FastMask = FastMask(0b1011_1010);
    pub const MATRICES: FastMask = FastMask(0b0100_0101);

    pub fn contains(self, t: HeadTensor) -> bool {
        self.0 & (1 << t.index()) != 0
    }

    pub fn with(self, t: HeadTensor) -> Self {
        FastMask(self.0 | (1 << t.index()))
    }

    pub fn without(self, t: HeadTensor) -> Self {
        FastMask(self.0 & !(1 << t.index()))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = HeadTensor> {
        HeadTensor::ALL.into_iter().filter(move |t| self.contains(*t))
    }
}

impl FromStr for FastMask {
    type Err = FwlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => return Ok(FastMask::ALL),
            "none" => return Ok(FastMask::NONE),
            "bias-only" => return Ok(FastMask::BIAS_ONLY),
            "vectors" => return Ok(FastMask::VECTORS),
            "matrices" => return Ok(FastMask::MATRICES),
            _ => {}
        }
        let mut m = FastMask::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let t = HeadTensor::from_name(part)
                .ok_or_else(|| FwlError::config("mask", format!("unknown tensor `{part}`")))?;
            m = m.with(t);
        }
        Ok(m)
    }
}

impl fmt::Display for FastMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            FastMask::ALL => f.write_str("all"),
            FastMask::NONE => f.write_str("none"),
            FastMask::BIAS_ONLY => f.write_str("bias-only"),
            FastMask::VECTORS => f.write_str("vectors"),
            FastMask::MATRICES => f.write_str("matrices"),
            m => {
                let names: Vec<_> = m.iter().map(HeadTensor::name).collect();
                f.write_str(&names.join(","))
            }
        }
    }
}

/// Slow weights θ of the head and output softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// d_model × d_hidden
    pub u: Matrix,
    pub a: Vector,
    /// d_hidden × d_model
    pub w: Matrix,
    pub b: Vector,
    pub ln_gain: Vector,
    pub ln_bias: Vector,
    /// d_model × vocab
    pub e: Matrix,
    pub c: Vector,
}

impl HeadParams {
    pub fn init(d_model: usize, d_hidden: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let mut normal = |r: usize, c: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("finite std");
            Matrix::from_vec(r, c, (0..r * c).map(|_| dist.sample(&mut rng)).collect()).expect("sized")
        };
        let u = normal(d_model, d_hidden, 1.0 / (d_model as f64).sqrt());
        let w = normal(d_hidden, d_model, 1.0 / (d_hidden as f64).sqrt());
        let e = normal(d_model, vocab, 1.0 / (d_model as f64).sqrt());
        HeadParams {
            u,
            a: vec![0.0; d_hidden],
            w,
            b: vec![0.0; d_model],
            ln_gain: vec![1.0; d_model],
            ln_bias: vec![0.0; d_model],
            e,
            c: vec![0.0; vocab],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale_all(0.0);
        z
    }

    pub fn d_model(&self) -> usize {
        self.u.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.e.cols()
    }

    /// Shape of a tensor as (rows, cols); vectors are single rows.
    pub fn shape_of(&self, t: HeadTensor) -> (usize, usize) {
        match t {
            HeadTensor::U => self.u.shape(),
            HeadTensor::W => self.w.shape(),
            HeadTensor::E => self.e.shape(),
            HeadTensor::A => (1, self.a.len()),
            HeadTensor::B => (1, self.b.len()),
            HeadTensor::LnGain => (1, self.ln_gain.len()),
            HeadTensor::LnBias => (1, self.ln_bias.len()),
            HeadTensor::C => (1, self.c.len()),
        }
    }

    pub fn tensor(&self, t: HeadTensor) -> &[f64] {
        match t {
            HeadTensor::U => self.u.data(),
            HeadTensor::A => &self.a,
            HeadTensor::W => self.w.data(),
            HeadTensor::B => &self.b,
            HeadTensor::LnGain => &self.ln_gain,
            HeadTensor::LnBias => &self.ln_bias,
            HeadTensor::E => self.e.data(),
            HeadTensor::C => &self.c,
        }
    }

    pub fn tensor_mut(&mut self, t: HeadTensor) -> &mut [f64] {
        match t {
            HeadTensor::U => self.u.data_mut(),
            HeadTensor::A => &mut self.a,
            HeadTensor::W => self.w.data_mut(),
            HeadTensor::B => &mut self.b,
            HeadTensor::LnGain => &mut self.ln_gain,
            HeadTensor::LnBias => &mut self.ln_bias,
            HeadTensor::E => self.e.data_mut(),
            HeadTensor::C => &mut self.c,
        }
    }
}

impl ParamSet for HeadParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for t in HeadTensor::ALL {
            let (r, c) = self.shape_of(t);
            let dims: &[usize] = if t.is_matrix() { &[r, c] } else { &[c] };
            f(&format!("head.{}", t.name()), dims, self.tensor(t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for t in HeadTensor::ALL {
            f(&format!("head.{}", t.name()), self.tensor_mut(t));
        }
    }
}

/// Default initial step size for every tensor.
pub const ALPHA_INIT: f64 = 0.01;
/// Default initial decay for the streaming accumulators.
pub const GAMMA_INIT: f64 = 0.9;

/// One learned step size per head tensor plus the fast-weight mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub alpha: [f64; 8],
    pub mask: FastMask,
}

impl StepSizes {
    pub fn new(mask: FastMask) -> Self {
        StepSizes::uniform(mask, ALPHA_INIT)
    }

    pub fn uniform(mask: FastMask, alpha: f64) -> Self {
        StepSizes {
            alpha: [alpha; 8],
            mask,
        }
    }

    /// Step size if the tensor is masked in.
    pub fn active(&self, t: HeadTensor) -> Option<f64> {
        self.mask.contains(t).then(|| self.alpha[t.index()])
    }
}

impl ParamSet for StepSizes {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("alpha", &[8], &self.alpha);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("alpha", &mut self.alpha);
    }
}

/// Streaming decays γ, stored as logits so `γ = sigmoid(logit)` stays in (0, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decays {
    pub logit: [f64; 8],
}

impl Default for Decays {
    fn default() -> Self {
        Decays::uniform(GAMMA_INIT)
    }
}

impl Decays {
    pub fn uniform(gamma: f64) -> Self {
        Decays {
            logit: [logit(gamma); 8],
        }
    }

    pub fn gamma(&self, t: HeadTensor) -> f64 {
        sigmoid(self.logit[t.index()])
    }
}

impl ParamSet for Decays {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("decay_logit", &[8], &self.logit);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("decay_logit", &mut self.logit);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Slow-pass activations for every position.
#[derive(Clone, Debug)]
pub struct PositionTape {
    pub h: Matrix,
    /// `h U + a`
    pub z: Matrix,
    /// `ReLU²(z)`
    pub v: Matrix,
    /// `v W` (before the bias)
    pub o: Matrix,
    pub ln: LayerNormRows,
    /// LayerNorm output
    pub u: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
    pub targets: Vec<usize>,
    pub losses: Vec<f64>,
}

/// Per-position upstream gradients. Row `t` only involves `L_t`.
#[derive(Clone, Debug)]
pub struct PositionGrads {
    /// `∂L_t/∂logits_t`; also the gradient row of `c`.
    pub g_logits: Matrix,
    /// Gradient at the LayerNorm output; also the gradient row of `ln_bias`.
    pub g_u: Matrix,
    /// Gradient row of `ln_gain`: `g_u ⊙ xhat`.
    pub g_lngain: Matrix,
    /// Gradient at the normalized activations: `g_u ⊙ ln_gain`.
    pub g_xhat: Matrix,
    /// `∂L_t/∂o_t`; also the gradient row of `b`.
    pub g_o: Matrix,
    /// Gradient at `v_t`.
    pub g_v: Matrix,
    /// `∂L_t/∂z_t`; also the gradient row of `a`.
    pub g_z: Matrix,
}

impl PositionGrads {
    /// Gradient rows of a vector tensor.
    pub fn vector_rows(&self, t: HeadTensor) -> &Matrix {
        match t {
            HeadTensor::A => &self.g_z,
            HeadTensor::B => &self.g_o,
            HeadTensor::LnGain => &self.g_lngain,
            HeadTensor::LnBias => &self.g_u,
            HeadTensor::C => &self.g_logits,
            _ => panic!("{} is a matrix tensor", t.name()),
        }
    }

    /// Value rows (upstream gradients) of a matrix tensor.
    pub fn values(&self, t: HeadTensor) -> &Matrix {
        match t {
            HeadTensor::U => &self.g_z,
            HeadTensor::W => &self.g_o,
            HeadTensor::E => &self.g_logits,
            _ => panic!("{} is a vector tensor", t.name()),
        }
    }
}

impl PositionTape {
    /// Key rows (slow-pass inputs) of a matrix tensor.
    pub fn keys(&self, t: HeadTensor) -> &Matrix {
        match t {
            HeadTensor::U => &self.h,
            HeadTensor::W => &self.v,
            HeadTensor::E => &self.u,
            _ => panic!("{} is a vector tensor", t.name()),
        }
    }
}

/// Full gradient of `L_t` alone with respect to `tensor`, from the rank-one identity.
pub fn position_gradient(tape: &PositionTape, grads: &PositionGrads, t: usize, tensor: HeadTensor) -> Matrix {
    if tensor.is_matrix() {
        let k = tape.keys(tensor).row(t);
        let v = grads.values(tensor).row(t);
        let mut m = Matrix::zeros(k.len(), v.len());
        crate::numerics::add_outer(&mut m, 1.0, k, v);
        m
    } else {
        Matrix::row_vector(grads.vector_rows(tensor).row(t))
    }
}

fn check_head_input(theta: &HeadParams, h: &Matrix, targets: &[usize]) -> Result<()> {
    if h.cols() != theta.d_model() {
        return Err(FwlError::Shape {
            op: "slow_forward(h)",
            lhs: h.shape(),
            rhs: theta.u.shape(),
        });
    }
    if targets.len() != h.rows() {
        return Err(FwlError::Shape {
            op: "slow_forward(targets)",
            lhs: h.shape(),
            rhs: (targets.len(), 1),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= theta.vocab_size()) {
        return Err(FwlError::Index {
            index: bad,
            len: theta.vocab_size(),
        });
    }
    Ok(())
}

fn relu2_rows(z: &Matrix) -> Matrix {
    z.map(relu2_scalar)
}

fn normalize_rows(x: &Matrix) -> LayerNormRows {
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let (h, r) = normalize(x.row(t), LN_EPS);
        xhat.row_mut(t).copy_from_slice(&h);
        inv_std.push(r);
    }
    LayerNormRows { xhat, inv_std }
}

/// `y = xhat ⊙ gain_t + bias_t` with per-row gain/bias.
fn affine_rows(xhat: &Matrix, gain: &Matrix, bias: &Matrix) -> Matrix {
    let mut y = Matrix::zeros(xhat.rows(), xhat.cols());
    for (i, yv) in y.data_mut().iter_mut().enumerate() {
        *yv = xhat.data()[i] * gain.data()[i] + bias.data()[i];
    }
    y
}

fn broadcast(v: &[f64], rows: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, v.len());
    m.add_row_broadcast(v);
    m
}

fn xent_rows(logits: &Matrix, targets: &[usize]) -> (Matrix, Vec<f64>) {
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut losses = Vec::with_capacity(logits.rows());
    for (t, &y) in targets.iter().enumerate() {
        let row = logits.row(t);
        let p = softmax(row);
        losses.push(softmax_xent(row, y).expect("target checked").0);
        probs.row_mut(t).copy_from_slice(&p);
    }
    (probs, losses)
}

/// Slow pass: per-position losses `L_t = CE(softmax(f_θ(h_t) E + c), target_t)`.
pub fn slow_forward(theta: &HeadParams, h: &Matrix, targets: &[usize]) -> Result<(PositionTape, Vec<f64>)> {
    check_head_input(theta, h, targets)?;
    let t_len = h.rows();
    let mut z = mm(h, &theta.u);
    z.add_row_broadcast(&theta.a);
    let v = relu2_rows(&z);
    let o = mm(&v, &theta.w);
    let mut x = o.clone();
    x.add_row_broadcast(&theta.b);
    let ln = normalize_rows(&x);
    let u = affine_rows(
        &ln.xhat,
        &broadcast(&theta.ln_gain, t_len),
        &broadcast(&theta.ln_bias, t_len),
    );
    let mut logits = mm(&u, &theta.e);
    logits.add_row_broadcast(&theta.c);
    let (probs, losses) = xent_rows(&logits, targets);
    let tape = PositionTape {
        h: h.clone(),
        z,
        v,
        o,
        ln,
        u,
        logits,
        probs,
        targets: targets.to_vec(),
        losses: losses.clone(),
    };
    Ok((tape, losses))
}

/// Per-position gradients of every `L_t`, all from one batched backward pass.
pub fn per_position_grads(theta: &HeadParams, tape: &PositionTape, targets: &[usize]) -> Result<PositionGrads> {
    if targets != tape.targets.as_slice() {
        return Err(FwlError::Input("targets differ from the slow-pass tape".into()));
    }
    let t_len = tape.h.rows();
    let mut g_logits = tape.probs.clone();
    for (t, &y) in targets.iter().enumerate() {
        g_logits[(t, y)] -= 1.0;
    }
    let g_u = mm_nt(&g_logits, &theta.e);
    let g_lngain = g_u.hadamard(&tape.ln.xhat);
    let g_xhat = g_u.hadamard(&broadcast(&theta.ln_gain, t_len));
    let mut g_o = Matrix::zeros(t_len, theta.d_model());
    for t in 0..t_len {
        let dx = normalize_bwd(tape.ln.xhat.row(t), tape.ln.inv_std[t], g_xhat.row(t));
        g_o.row_mut(t).copy_from_slice(&dx);
    }
    let g_v = mm_nt(&g_o, &theta.w);
    let mut g_z = g_v.clone();
    for (g, &z) in g_z.data_mut().iter_mut().zip(tape.z.data()) {
        *g *= 2.0 * z.max(0.0);
    }
    Ok(PositionGrads {
        g_logits,
        g_u,
        g_lngain,
        g_xhat,
        g_o,
        g_v,
        g_z,
    })
}

/// One carried accumulator. The effective offset used by the next segment is
/// `γ·carried + fresh`; both parts are constants.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamEntry {
    pub carried: Matrix,
    pub fresh: Matrix,
}

/// Running fast-weight deltas carried across segments (stop-gradient).
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub entries: [Option<StreamEntry>; 8],
}

impl StreamState {
    /// Zero accumulators for every tensor in `mask`.
    pub fn empty(theta: &HeadParams, mask: FastMask) -> Self {
        let entries = std::array::from_fn(|i| {
            let t = HeadTensor::ALL[i];
            mask.contains(t).then(|| {
                let (r, c) = theta.shape_of(t);
                StreamEntry {
                    carried: Matrix::zeros(r, c),
                    fresh: Matrix::zeros(r, c),
                }
            })
        });
        StreamState { entries }
    }

    /// `γ·carried + fresh` for tensor `t`.
    pub fn effective(&self, t: HeadTensor, decays: &Decays) -> Option<Matrix> {
        self.entries[t.index()].as_ref().map(|e| {
            let mut d = e.carried.scaled(decays.gamma(t));
            d.add_assign(&e.fresh);
            d
        })
    }
}

/// Folds one segment's summed per-position gradients into the state.
pub fn update_stream_state(
    state: &StreamState,
    grads: &PositionGrads,
    tape: &PositionTape,
    decays: &Decays,
) -> StreamState {
    let entries = std::array::from_fn(|i| {
        let t = HeadTensor::ALL[i];
        state.entries[i].as_ref().map(|_| {
            let fresh = if t.is_matrix() {
                mm_tn(tape.keys(t), grads.values(t))
            } else {
                Matrix::row_vector(&grads.vector_rows(t).col_sums())
            };
            StreamEntry {
                carried: state.effective(t, decays).expect("entry present"),
                fresh,
            }
        })
    });
    StreamState { entries }
}

/// Optional streaming context for the fast pass.
#[derive(Clone, Copy, Debug)]
pub struct Stream<'a> {
    pub state: &'a StreamState,
    pub decays: &'a Decays,
}

fn stream_delta(theta: &HeadParams, stream: Option<Stream<'_>>, t: HeadTensor) -> Result<Option<Matrix>> {
    let Some(s) = stream else { return Ok(None) };
    let Some(d) = s.state.effective(t, s.decays) else {
        return Ok(None);
    };
    if d.shape() != theta.shape_of(t) {
        return Err(FwlError::State(format!(
            "accumulator for {} has shape {:?}, expected {:?}",
            t.name(),
            d.shape(),
            theta.shape_of(t)
        )));
    }
    Ok(Some(d))
}

/// Intermediates of the fast pass, kept for the outer-loop backward.
#[derive(Clone, Debug)]
pub struct FastPass {
    pub losses: Vec<f64>,
    pub logits: Matrix,
    pub probs: Matrix,
    z: Matrix,
    v: Matrix,
    ln: LayerNormRows,
    gain: Matrix,
    y: Matrix,
    /// The bracketed term each α multiplies.
    terms: [Option<Matrix>; 8],
    /// Effective stream offsets used.
    deltas: [Option<Matrix>; 8],
    chunk: usize,
}

fn vector_term(g: &Matrix, delta: Option<&Matrix>) -> Matrix {
    let mut term = exclusive_cumsum_rows(g);
    if let Some(d) = delta {
        term.add_row_broadcast(d.row(0));
    }
    term
}

fn matrix_term(q: &Matrix, k: &Matrix, v: &Matrix, delta: Option<&Matrix>, chunk: usize) -> Result<Matrix> {
    let init = delta.map(|d| KVState {
        accumulator: d.clone(),
    });
    Ok(chunked_causal_linear_attention(q, k, v, chunk, init.as_ref())?.0)
}

/// Fast pass with evolving weights θ'_t = θ − α ∘ (Δ + Σ_{i<t} ∇θ L_i).
pub fn fast_forward(
    theta: &HeadParams,
    steps: &StepSizes,
    tape: &PositionTape,
    grads: &PositionGrads,
    stream: Option<Stream<'_>>,
    chunk: usize,
) -> Result<FastPass> {
    let t_len = tape.h.rows();
    let mut terms: [Option<Matrix>; 8] = Default::default();
    let mut deltas: [Option<Matrix>; 8] = Default::default();
    for t in steps.mask.iter() {
        deltas[t.index()] = stream_delta(theta, stream, t)?;
    }
    let delta = |t: HeadTensor| deltas[t.index()].as_ref();

    // U, a
    let mut z = tape.z.clone();
    if let Some(alpha) = steps.active(HeadTensor::U) {
        let term = matrix_term(&tape.h, &tape.h, &grads.g_z, delta(HeadTensor::U), chunk)?;
        z.axpy(-alpha, &term);
        terms[HeadTensor::U.index()] = Some(term);
    }
    if let Some(alpha) = steps.active(HeadTensor::A) {
        let term = vector_term(&grads.g_z, delta(HeadTensor::A));
        z.axpy(-alpha, &term);
        terms[HeadTensor::A.index()] = Some(term);
    }
    let v = relu2_rows(&z);

    // W, b
    let mut x = mm(&v, &theta.w);
    if let Some(alpha) = steps.active(HeadTensor::W) {
        let term = matrix_term(&v, &tape.v, &grads.g_o, delta(HeadTensor::W), chunk)?;
        x.axpy(-alpha, &term);
        terms[HeadTensor::W.index()] = Some(term);
    }
    x.add_row_broadcast(&theta.b);
    if let Some(alpha) = steps.active(HeadTensor::B) {
        let term = vector_term(&grads.g_o, delta(HeadTensor::B));
        x.axpy(-alpha, &term);
        terms[HeadTensor::B.index()] = Some(term);
    }

    // LayerNorm with per-position fast gain/bias; statistics from fast activations
    let ln = normalize_rows(&x);
    let mut gain = broadcast(&theta.ln_gain, t_len);
    if let Some(alpha) = steps.active(HeadTensor::LnGain) {
        let term = vector_term(&grads.g_lngain, delta(HeadTensor::LnGain));
        gain.axpy(-alpha, &term);
        terms[HeadTensor::LnGain.index()] = Some(term);
    }
    let mut bias = broadcast(&theta.ln_bias, t_len);
    if let Some(alpha) = steps.active(HeadTensor::LnBias) {
        let term = vector_term(&grads.g_u, delta(HeadTensor::LnBias));
        bias.axpy(-alpha, &term);
        terms[HeadTensor::LnBias.index()] = Some(term);
    }
    let y = affine_rows(&ln.xhat, &gain, &bias);

    // E, c
    let mut logits = mm(&y, &theta.e);
    if let Some(alpha) = steps.active(HeadTensor::E) {
        let term = matrix_term(&y, &tape.u, &grads.g_logits, delta(HeadTensor::E), chunk)?;
        logits.axpy(-alpha, &term);
        terms[HeadTensor::E.index()] = Some(term);
    }
    logits.add_row_broadcast(&theta.c);
    if let Some(alpha) = steps.active(HeadTensor::C) {
        let term = vector_term(&grads.g_logits, delta(HeadTensor::C));
        logits.axpy(-alpha, &term);
        terms[HeadTensor::C.index()] = Some(term);
    }
    let (probs, losses) = xent_rows(&logits, &tape.targets);
    Ok(FastPass {
        losses,
        logits,
        probs,
        z,
        v,
        ln,
        gain,
        y,
        terms,
        deltas,
        chunk,
    })
}

/// Whether the outer gradient differentiates through the per-position gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GradOrder {
    #[default]
    Second,
    /// Per-position gradients (keys and values) treated as constants.
    First,
}

/// Outer-loop gradients of a weighted loss sum over the head.
#[derive(Clone, Debug)]
pub struct HeadBackward {
    pub d_head: HeadParams,
    /// `None` for tensors outside the mask.
    pub d_alpha: [Option<f64>; 8],
    /// Gradient with respect to the decay logits; `None` without streaming.
    pub d_decay_logit: [Option<f64>; 8],
    pub d_h: Matrix,
    /// Gradient at the effective stream offsets. The state itself is a
    /// constant, so this never propagates further.
    pub d_delta: [Option<Matrix>; 8],
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Backward of `Σ_t weights[t] · L_t` through the slow pass only.
pub fn slow_backward(
    theta: &HeadParams,
    tape: &PositionTape,
    grads: &PositionGrads,
    weights: &[f64],
) -> (HeadParams, Matrix) {
    let scale_rows = |m: &Matrix| {
        let mut s = m.clone();
        for (t, &w) in weights.iter().enumerate() {
            s.row_mut(t).iter_mut().for_each(|x| *x *= w);
        }
        s
    };
    let gz = scale_rows(&grads.g_z);
    let go = scale_rows(&grads.g_o);
    let gl = scale_rows(&grads.g_logits);
    let gu = scale_rows(&grads.g_u);
    let gg = scale_rows(&grads.g_lngain);
    let d_head = HeadParams {
        u: mm_tn(&tape.h, &gz),
        a: gz.col_sums(),
        w: mm_tn(&tape.v, &go),
        b: go.col_sums(),
        ln_gain: gg.col_sums(),
        ln_bias: gu.col_sums(),
        e: mm_tn(&tape.u, &gl),
        c: gl.col_sums(),
    };
    let d_h = mm_nt(&gz, &theta.u);
    (d_head, d_h)
}

/// Backward of `Σ_t weights[t] · L'_t` through the fast pass, the per-position
/// gradients (unless `order` is [`GradOrder::First`]) and the slow pass.
#[allow(clippy::too_many_arguments)]
pub fn fast_backward(
    theta: &HeadParams,
    steps: &StepSizes,
    tape: &PositionTape,
    grads: &PositionGrads,
    stream: Option<Stream<'_>>,
    fast: &FastPass,
    weights: &[f64],
    order: GradOrder,
) -> Result<HeadBackward> {
    let t_len = tape.h.rows();
    let d = theta.d_model();
    let n = d as f64;
    let chunk = fast.chunk;
    let mut dh_ = theta.zeros_like();
    let mut d_alpha = [None; 8];
    let mut d_delta: [Option<Matrix>; 8] = Default::default();

    // accumulators for the slow-pass quantities
    let mut d_gl = Matrix::zeros(t_len, theta.vocab_size());
    let mut d_gu = Matrix::zeros(t_len, d);
    let mut d_gg = Matrix::zeros(t_len, d);
    let mut d_go = Matrix::zeros(t_len, d);
    let mut d_gz = Matrix::zeros(t_len, theta.d_hidden());
    let mut d_u_slow = Matrix::zeros(t_len, d);
    let mut d_v_slow = Matrix::zeros(t_len, theta.d_hidden());
    let mut d_h = Matrix::zeros(t_len, d);

    let term = |t: HeadTensor| fast.terms[t.index()].as_ref().expect("masked term");
    let delta = |t: HeadTensor| fast.deltas[t.index()].as_ref();

    // logits' = y'E − αE·termE + c − αc·termC
    let mut d_logits = fast.probs.clone();
    for (t, &y) in tape.targets.iter().enumerate() {
        d_logits[(t, y)] -= 1.0;
        d_logits.row_mut(t).iter_mut().for_each(|x| *x *= weights[t]);
    }
    add_into(&mut dh_.c, &d_logits.col_sums());
    if let Some(alpha) = steps.active(HeadTensor::C) {
        d_alpha[HeadTensor::C.index()] = Some(-d_logits.dot(term(HeadTensor::C)));
        let mut dterm = d_logits.clone();
        dterm.scale(-alpha);
        d_gl.add_assign(&reverse_exclusive_cumsum_rows(&dterm));
        if delta(HeadTensor::C).is_some() {
            d_delta[HeadTensor::C.index()] = Some(Matrix::row_vector(&dterm.col_sums()));
        }
    }
    dh_.e.add_assign(&mm_tn(&fast.y, &d_logits));
    let mut d_y = mm_nt(&d_logits, &theta.e);
    if let Some(alpha) = steps.active(HeadTensor::E) {
        d_alpha[HeadTensor::E.index()] = Some(-d_logits.dot(term(HeadTensor::E)));
        let mut dterm = d_logits.clone();
        dterm.scale(-alpha);
        let init = delta(HeadTensor::E).map(|m| KVState { accumulator: m.clone() });
        let g = linear_attention_backward(&fast.y, &tape.u, &grads.g_logits, init.as_ref(), &dterm, chunk)?;
        d_y.add_assign(&g.dq);
        d_u_slow.add_assign(&g.dk);
        d_gl.add_assign(&g.dv);
        if init.is_some() {
            d_delta[HeadTensor::E.index()] = Some(g.dinit);
        }
    }

    // y' = xhat' ⊙ gain' + bias'
    let d_xhat_f = d_y.hadamard(&fast.gain);
    let d_gain = d_y.hadamard(&fast.ln.xhat);
    add_into(&mut dh_.ln_gain, &d_gain.col_sums());
    if let Some(alpha) = steps.active(HeadTensor::LnGain) {
        d_alpha[HeadTensor::LnGain.index()] = Some(-d_gain.dot(term(HeadTensor::LnGain)));
        let mut dterm = d_gain.clone();
        dterm.scale(-alpha);
        d_gg.add_assign(&reverse_exclusive_cumsum_rows(&dterm));
        if delta(HeadTensor::LnGain).is_some() {
            d_delta[HeadTensor::LnGain.index()] = Some(Matrix::row_vector(&dterm.col_sums()));
        }
    }
    add_into(&mut dh_.ln_bias, &d_y.col_sums());
    if let Some(alpha) = steps.active(HeadTensor::LnBias) {
        d_alpha[HeadTensor::LnBias.index()] = Some(-d_y.dot(term(HeadTensor::LnBias)));
        let mut dterm = d_y.clone();
        dterm.scale(-alpha);
        d_gu.add_assign(&reverse_exclusive_cumsum_rows(&dterm));
        if delta(HeadTensor::LnBias).is_some() {
            d_delta[HeadTensor::LnBias.index()] = Some(Matrix::row_vector(&dterm.col_sums()));
        }
    }
    let mut d_x = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        let r = normalize_bwd(fast.ln.xhat.row(t), fast.ln.inv_std[t], d_xhat_f.row(t));
        d_x.row_mut(t).copy_from_slice(&r);
    }

    // x' = v'W − αW·termW + b − αb·termB
    add_into(&mut dh_.b, &d_x.col_sums());
    if let Some(alpha) = steps.active(HeadTensor::B) {
        d_alpha[HeadTensor::B.index()] = Some(-d_x.dot(term(HeadTensor::B)));
        let mut dterm = d_x.clone();
        dterm.scale(-alpha);
        d_go.add_assign(&reverse_exclusive_cumsum_rows(&dterm));
        if delta(HeadTensor::B).is_some() {
            d_delta[HeadTensor::B.index()] = Some(Matrix::row_vector(&dterm.col_sums()));
        }
    }
    dh_.w.add_assign(&mm_tn(&fast.v, &d_x));
    let mut d_v = mm_nt(&d_x, &theta.w);
    if let Some(alpha) = steps.active(HeadTensor::W) {
        d_alpha[HeadTensor::W.index()] = Some(-d_x.dot(term(HeadTensor::W)));
        let mut dterm = d_x.clone();
        dterm.scale(-alpha);
        let init = delta(HeadTensor::W).map(|m| KVState { accumulator: m.clone() });
        let g = linear_attention_backward(&fast.v, &tape.v, &grads.g_o, init.as_ref(), &dterm, chunk)?;
        d_v.add_assign(&g.dq);
        d_v_slow.add_assign(&g.dk);
        d_go.add_assign(&g.dv);
        if init.is_some() {
            d_delta[HeadTensor::W.index()] = Some(g.dinit);
        }
    }

    // v' = ReLU²(z')
    let mut d_z = d_v;
    for (g, &z) in d_z.data_mut().iter_mut().zip(fast.z.data()) {
        *g *= 2.0 * z.max(0.0);
    }

    // z' = hU + a − αU·termU − αa·termA
    dh_.u.add_assign(&mm_tn(&tape.h, &d_z));
    add_into(&mut dh_.a, &d_z.col_sums());
    d_h.add_assign(&mm_nt(&d_z, &theta.u));
    if let Some(alpha) = steps.active(HeadTensor::A) {
        d_alpha[HeadTensor::A.index()] = Some(-d_z.dot(term(HeadTensor::A)));
        let mut dterm = d_z.clone();
        dterm.scale(-alpha);
        d_gz.add_assign(&reverse_exclusive_cumsum_rows(&dterm));
        if delta(HeadTensor::A).is_some() {
            d_delta[HeadTensor::A.index()] = Some(Matrix::row_vector(&dterm.col_sums()));
        }
    }
    if let Some(alpha) = steps.active(HeadTensor::U) {
        d_alpha[HeadTensor::U.index()] = Some(-d_z.dot(term(HeadTensor::U)));
        let mut dterm = d_z.clone();
        dterm.scale(-alpha);
        let init = delta(HeadTensor::U).map(|m| KVState { accumulator: m.clone() });
        let g = linear_attention_backward(&tape.h, &tape.h, &grads.g_z, init.as_ref(), &dterm, chunk)?;
        d_h.add_assign(&g.dq);
        if order == GradOrder::Second {
            d_h.add_assign(&g.dk);
        }
        d_gz.add_assign(&g.dv);
        if init.is_some() {
            d_delta[HeadTensor::U.index()] = Some(g.dinit);
        }
    }

    // decays: Δ = γ·carried + fresh
    let mut d_decay_logit = [None; 8];
    if let Some(s) = stream {
        for t in steps.mask.iter() {
            if let (Some(dd), Some(entry)) = (&d_delta[t.index()], &s.state.entries[t.index()]) {
                let g = s.decays.gamma(t);
                d_decay_logit[t.index()] = Some(dd.dot(&entry.carried) * g * (1.0 - g));
            }
        }
    }

    if order == GradOrder::First {
        // keys and values are constants; only the slow pre-activation path remains,
        // which fast_forward already consumed through z = hU + a.
        return Ok(HeadBackward {
            d_head: dh_,
            d_alpha,
            d_decay_logit,
            d_h,
            d_delta,
        });
    }

    // ---- second order: back through the per-position gradients ----
    let ln_gain = broadcast(&theta.ln_gain, t_len);
    let xhat = &tape.ln.xhat;
    let mut d_xhat = Matrix::zeros(t_len, d);
    let mut d_rstd = vec![0.0; t_len];
    let mut d_z_slow = Matrix::zeros(t_len, theta.d_hidden());

    // g_z = g_v ⊙ 2·relu(z)
    let mut d_gv = d_gz.clone();
    for (i, g) in d_gv.data_mut().iter_mut().enumerate() {
        *g *= 2.0 * tape.z.data()[i].max(0.0);
    }
    for (i, dz) in d_z_slow.data_mut().iter_mut().enumerate() {
        if tape.z.data()[i] > 0.0 {
            *dz += d_gz.data()[i] * grads.g_v.data()[i] * 2.0;
        }
    }
    // g_v = g_o Wᵀ
    d_go.add_assign(&mm(&d_gv, &theta.w));
    dh_.w.add_assign(&mm_tn(&d_gv, &grads.g_o));
    // g_o = normalize_bwd(xhat, rstd, g_xhat)
    let mut d_gxhat = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        let r = tape.ln.inv_std[t];
        let h = xhat.row(t);
        let dgo = d_go.row(t);
        let gxh = grads.g_xhat.row(t);
        d_gxhat.row_mut(t).copy_from_slice(&normalize_bwd(h, r, dgo));
        let m2 = dot(gxh, h) / n;
        let m3 = dot(dgo, h) / n;
        for j in 0..d {
            d_xhat[(t, j)] -= r * (m2 * dgo[j] + m3 * gxh[j]);
        }
        d_rstd[t] += dot(dgo, grads.g_o.row(t)) / r;
    }
    // g_xhat = g_u ⊙ gain
    d_gu.add_assign(&d_gxhat.hadamard(&ln_gain));
    add_into(&mut dh_.ln_gain, &d_gxhat.hadamard(&grads.g_u).col_sums());
    // g_lngain = g_u ⊙ xhat
    d_gu.add_assign(&d_gg.hadamard(xhat));
    d_xhat.add_assign(&d_gg.hadamard(&grads.g_u));
    // g_u = g_logits Eᵀ
    d_gl.add_assign(&mm(&d_gu, &theta.e));
    dh_.e.add_assign(&mm_tn(&d_gu, &grads.g_logits));
    // g_logits = softmax(logits) − onehot
    let mut d_logits_slow = Matrix::zeros(t_len, theta.vocab_size());
    for t in 0..t_len {
        let p = tape.probs.row(t);
        let dg = d_gl.row(t);
        let inner = dot(p, dg);
        for (j, out) in d_logits_slow.row_mut(t).iter_mut().enumerate() {
            *out = p[j] * (dg[j] - inner);
        }
    }

    // ---- slow forward ----
    // logits = uE + c
    d_u_slow.add_assign(&mm_nt(&d_logits_slow, &theta.e));
    dh_.e.add_assign(&mm_tn(&tape.u, &d_logits_slow));
    add_into(&mut dh_.c, &d_logits_slow.col_sums());
    // u = xhat ⊙ gain + bias
    d_xhat.add_assign(&d_u_slow.hadamard(&ln_gain));
    add_into(&mut dh_.ln_gain, &d_u_slow.hadamard(xhat).col_sums());
    add_into(&mut dh_.ln_bias, &d_u_slow.col_sums());
    // (xhat, rstd) from x = o + b
    let mut d_x_slow = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        let r = tape.ln.inv_std[t];
        let h = xhat.row(t);
        let mut dx = normalize_bwd(h, r, d_xhat.row(t));
        for j in 0..d {
            dx[j] -= r * r * d_rstd[t] * h[j] / n;
        }
        d_x_slow.row_mut(t).copy_from_slice(&dx);
    }
    add_into(&mut dh_.b, &d_x_slow.col_sums());
    // o = vW
    d_v_slow.add_assign(&mm_nt(&d_x_slow, &theta.w));
    dh_.w.add_assign(&mm_tn(&tape.v, &d_x_slow));
    // v = ReLU²(z)
    for (i, dz) in d_z_slow.data_mut().iter_mut().enumerate() {
        *dz += d_v_slow.data()[i] * 2.0 * tape.z.data()[i].max(0.0);
    }
    // z = hU + a
    dh_.u.add_assign(&mm_tn(&tape.h, &d_z_slow));
    add_into(&mut dh_.a, &d_z_slow.col_sums());
    d_h.add_assign(&mm_nt(&d_z_slow, &theta.u));

    Ok(HeadBackward {
        d_head: dh_,
        d_alpha,
        d_decay_logit,
        d_h,
        d_delta,
    })
}

/// Accumulated fast-weight offsets for token-by-token generation.
///
/// `stream` holds the effective carried deltas (`γ·carried + fresh`) of
/// earlier segments, `segment` the gradients summed within the current one.
/// Both are stored without α, like [`StreamState`] accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct FastOffsets {
    pub stream: [Option<Matrix>; 8],
    pub segment: [Option<Matrix>; 8],
}

impl FastOffsets {
    pub fn new(theta: &HeadParams, mask: FastMask) -> Self {
        let zeros = |i: usize| {
            let t = HeadTensor::ALL[i];
            mask.contains(t).then(|| {
                let (r, c) = theta.shape_of(t);
                Matrix::zeros(r, c)
            })
        };
        FastOffsets {
            stream: std::array::from_fn(zeros),
            segment: std::array::from_fn(zeros),
        }
    }

    /// Starts a new segment with the given stream state.
    pub fn from_stream(theta: &HeadParams, mask: FastMask, state: &StreamState, decays: &Decays) -> Self {
        let mut o = FastOffsets::new(theta, mask);
        for t in mask.iter() {
            if let Some(d) = state.effective(t, decays) {
                o.stream[t.index()] = Some(d);
            }
        }
        o
    }

    /// Closes the current segment: `stream ← γ·stream + segment`, `segment ← 0`.
    /// Matches [`update_stream_state`] followed by [`StreamState::effective`].
    pub fn end_segment(&self, decays: &Decays) -> Self {
        let mut next = self.clone();
        for t in HeadTensor::ALL {
            let i = t.index();
            let seg = self.segment[i].clone();
            next.stream[i] = match (&self.stream[i], seg) {
                (Some(s), Some(g)) => {
                    let mut m = s.scaled(decays.gamma(t));
                    m.add_assign(&g);
                    Some(m)
                }
                (None, g) => g,
                (Some(s), None) => Some(s.scaled(decays.gamma(t))),
            };
            if let Some(g) = &mut next.segment[i] {
                g.scale(0.0);
            }
        }
        next
    }

    fn total(&self, t: HeadTensor) -> Option<Matrix> {
        match (&self.stream[t.index()], &self.segment[t.index()]) {
            (Some(s), Some(g)) => {
                let mut m = s.clone();
                m.add_assign(g);
                Some(m)
            }
            (None, Some(g)) => Some(g.clone()),
            (Some(s), None) => Some(s.clone()),
            (None, None) => None,
        }
    }
}

/// Materializes θ' = θ − α ∘ offsets.
pub fn fast_params(theta: &HeadParams, steps: &StepSizes, offsets: &FastOffsets) -> HeadParams {
    let mut fast = theta.clone();
    for t in steps.mask.iter() {
        if let Some(total) = offsets.total(t) {
            let alpha = steps.alpha[t.index()];
            for (w, g) in fast.tensor_mut(t).iter_mut().zip(total.data()) {
                *w -= alpha * g;
            }
        }
    }
    fast
}

/// Logits of the head for a single context vector.
pub fn head_logits(theta: &HeadParams, h: &[f64]) -> Vector {
    let mut z = vecmat(h, &theta.u);
    add_into(&mut z, &theta.a);
    let v: Vector = z.iter().map(|&x| relu2_scalar(x)).collect();
    let mut x = vecmat(&v, &theta.w);
    add_into(&mut x, &theta.b);
    let (xhat, _) = normalize(&x, LN_EPS);
    let u: Vector = (0..xhat.len())
        .map(|j| xhat[j] * theta.ln_gain[j] + theta.ln_bias[j])
        .collect();
    let mut logits = vecmat(&u, &theta.e);
    add_into(&mut logits, &theta.c);
    logits
}

/// Draws from `softmax(logits / temperature)`; temperature 0 is argmax with
/// ties broken towards the lowest id.
pub fn sample_token<R: Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let scaled: Vector = logits.iter().map(|l| l / temperature).collect();
    let p = softmax(&scaled);
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if r < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Clone, Debug)]
pub struct GeneratedStep {
    pub token: usize,
    /// `L'_t` of the sampled token under the fast weights.
    pub loss: f64,
    pub offsets: FastOffsets,
}

/// Scores `token` at `h_t` under θ', then folds the slow-weight gradient of
/// predicting it into the offsets. Used for teacher-forced prompt tokens.
pub fn observe_step(
    theta: &HeadParams,
    steps: &StepSizes,
    offsets: &FastOffsets,
    h_t: &[f64],
    token: usize,
) -> Result<(f64, FastOffsets)> {
    let fast = fast_params(theta, steps, offsets);
    let (loss, _) = softmax_xent(&head_logits(&fast, h_t), token)?;
    Ok((loss, fold_gradient(theta, steps, offsets, h_t, token)?))
}

fn fold_gradient(
    theta: &HeadParams,
    steps: &StepSizes,
    offsets: &FastOffsets,
    h_t: &[f64],
    token: usize,
) -> Result<FastOffsets> {
    let h = Matrix::row_vector(h_t);
    let (tape, _) = slow_forward(theta, &h, &[token])?;
    let grads = per_position_grads(theta, &tape, &[token])?;
    let mut next = offsets.clone();
    for t in steps.mask.iter() {
        let g = position_gradient(&tape, &grads, 0, t);
        match &mut next.segment[t.index()] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
    Ok(next)
}

/// One generation step: sample with θ', take the slow-weight gradient of
/// predicting the sampled token, fold it into the offsets.
pub fn generate_step<R: Rng>(
    theta: &HeadParams,
    steps: &StepSizes,
    offsets: &FastOffsets,
    h_t: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<GeneratedStep> {
    let fast = fast_params(theta, steps, offsets);
    let logits = head_logits(&fast, h_t);
    let token = sample_token(&logits, temperature, rng);
    let (loss, _) = softmax_xent(&logits, token)?;
    Ok(GeneratedStep {
        token,
        loss,
        offsets: fold_gradient(theta, steps, offsets, h_t, token)?,
    })
}

/// Convenience: slow pass, per-position gradients and fast pass in one call.
pub fn score_fast(
    theta: &HeadParams,
    steps: &StepSizes,
    h: &Matrix,
    targets: &[usize],
    stream: Option<Stream<'_>>,
) -> Result<(PositionTape, PositionGrads, FastPass)> {
    let (tape, _) = slow_forward(theta, h, targets)?;
    let grads = per_position_grads(theta, &tape, targets)?;
    let fast = fast_forward(theta, steps, &tape, &grads, stream, DEFAULT_CHUNK)?;
    Ok((tape, grads, fast))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, rel_err};

    pub(crate) fn random_instance(seed: u64, t: usize, d: usize, dh: usize, vocab: usize) -> (HeadParams, Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = HeadParams::init(d, dh, vocab, seed);
        let h = Matrix::from_vec(t, d, (0..t * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let targets = (0..t).map(|_| rng.random_range(0..vocab)).collect();
        (theta, h, targets)
    }

    fn random_steps(seed: u64, mask: FastMask) -> StepSizes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        let mut s = StepSizes::new(mask);
        for a in s.alpha.iter_mut() {
            *a = rng.random_range(0.05..0.4);
        }
        s
    }

    #[test]
    fn mask_parsing() {
        assert_eq!("all".parse::<FastMask>().unwrap(), FastMask::ALL);
        assert_eq!("bias-only".parse::<FastMask>().unwrap(), FastMask::BIAS_ONLY);
        let m: FastMask = "U,c".parse().unwrap();
        assert!(m.contains(HeadTensor::U) && m.contains(HeadTensor::C) && !m.contains(HeadTensor::W));
        assert_eq!(m.to_string().parse::<FastMask>().unwrap(), m);
        assert!("Q".parse::<FastMask>().is_err());
        assert_eq!(FastMask::VECTORS.iter().count(), 5);
        assert!(FastMask::MATRICES.iter().all(HeadTensor::is_matrix));
    }

    #[test]
    fn uniform_head_gives_ln2() {
        let mut theta = HeadParams::init(1, 1, 2, 0);
        theta.scale_all(0.0);
        let h = Matrix::from_rows(&[[0.7]]);
        let (_, losses) = slow_forward(&theta, &h, &[1]).unwrap();
        assert!((losses[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn slow_forward_shape_errors() {
        let (theta, h, _) = random_instance(1, 3, 4, 6, 5);
        assert!(matches!(slow_forward(&theta, &h, &[0, 1]), Err(FwlError::Shape { .. })));
        assert!(matches!(slow_forward(&theta, &h, &[0, 1, 9]), Err(FwlError::Index { .. })));
        let bad = Matrix::zeros(3, 5);
        assert!(slow_forward(&theta, &bad, &[0, 1, 2]).is_err());
    }

    #[test]
    fn g_c_is_softmax_minus_onehot() {
        let (theta, h, y) = random_instance(2, 5, 4, 6, 5);
        let (tape, _) = slow_forward(&theta, &h, &y).unwrap();
        let g = per_position_grads(&theta, &tape, &y).unwrap();
        for t in 0..5 {
            let mut p = softmax(tape.logits.row(t));
            p[y[t]] -= 1.0;
            assert_eq!(g.g_logits.row(t), p.as_slice());
        }
    }

    #[test]
    fn uniform_logits_give_antisymmetric_gradient() {
        let mut theta = HeadParams::init(2, 3, 2, 0);
        theta.e.scale(0.0);
        let h = Matrix::from_rows(&[[0.3, -0.2]]);
        let (tape, _) = slow_forward(&theta, &h, &[0]).unwrap();
        let g = per_position_grads(&theta, &tape, &[0]).unwrap();
        assert_eq!(g.g_logits.row(0), &[-0.5, 0.5]);
    }

    /// Rank-one identity for every tensor against finite differences of L_t alone.
    #[test]
    fn per_position_gradients_match_finite_differences() {
        let (theta, h, y) = random_instance(3, 4, 8, 12, 5);
        let (tape, _) = slow_forward(&theta, &h, &y).unwrap();
        let grads = per_position_grads(&theta, &tape, &y).unwrap();
        for t in 0..4 {
            for tensor in HeadTensor::ALL {
                let an = position_gradient(&tape, &grads, t, tensor);
                let f = |x: &[f64]| {
                    let mut th = theta.clone();
                    th.tensor_mut(tensor).copy_from_slice(x);
                    slow_forward(&th, &h, &y).unwrap().1[t]
                };
                let fd = finite_diff_grad(f, theta.tensor(tensor), 1e-5);
                let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
                for (a, b) in an.data().iter().zip(&fd) {
                    assert!((a - b).abs() / scale < 1e-5, "{} t={t}: {a} vs {b}", tensor.name());
                }
            }
        }
    }

    #[test]
    fn zero_alpha_and_empty_mask_are_identities() {
        let (theta, h, y) = random_instance(4, 9, 6, 10, 7);
        let (tape, losses) = slow_forward(&theta, &h, &y).unwrap();
        let grads = per_position_grads(&theta, &tape, &y).unwrap();
        let f = fast_forward(&theta, &StepSizes::uniform(FastMask::ALL, 0.0), &tape, &grads, None, 4).unwrap();
        assert_eq!(f.losses, losses);
        let f = fast_forward(&theta, &StepSizes::new(FastMask::NONE), &tape, &grads, None, 4).unwrap();
        assert_eq!(f.losses, losses);
        assert_eq!(f.logits, tape.logits);
        let f = fast_forward(&theta, &random_steps(1, FastMask::ALL), &tape, &grads, None, 4).unwrap();
        assert_eq!(f.losses[0], losses[0]);
        assert_ne!(f.losses[5], losses[5]);
    }

    #[test]
    fn fast_logits_depend_only_on_earlier_targets() {
        let (theta, h, y) = random_instance(5, 8, 6, 10, 7);
        let steps = random_steps(5, FastMask::ALL);
        let (_, _, base) = score_fast(&theta, &steps, &h, &y, None).unwrap();
        let mut y2 = y.clone();
        y2[4] = (y2[4] + 1) % 7;
        let (_, _, alt) = score_fast(&theta, &steps, &h, &y2, None).unwrap();
        for t in 0..=4 {
            assert_eq!(base.logits.row(t), alt.logits.row(t));
        }
        assert_eq!(&base.losses[..4], &alt.losses[..4]);
        assert_ne!(base.logits.row(5), alt.logits.row(5));
    }

    #[test]
    fn chunk_size_does_not_change_the_fast_pass() {
        let (theta, h, y) = random_instance(6, 21, 6, 10, 7);
        let steps = random_steps(6, FastMask::ALL);
        let (tape, _) = slow_forward(&theta, &h, &y).unwrap();
        let grads = per_position_grads(&theta, &tape, &y).unwrap();
        let a = fast_forward(&theta, &steps, &tape, &grads, None, 1).unwrap();
        let b = fast_forward(&theta, &steps, &tape, &grads, None, 5).unwrap();
        let c = fast_forward(&theta, &steps, &tape, &grads, None, 64).unwrap();
        for t in 0..21 {
            assert!((a.losses[t] - c.losses[t]).abs() < 1e-10);
            assert!((b.losses[t] - c.losses[t]).abs() < 1e-10);
        }
    }

    fn stream_of(theta: &HeadParams, mask: FastMask, seed: u64) -> StreamState {
        let (_, h, y) = random_instance(seed, 6, theta.d_model(), theta.d_hidden(), theta.vocab_size());
        let (tape, _) = slow_forward(theta, &h, &y).unwrap();
        let grads = per_position_grads(theta, &tape, &y).unwrap();
        let s0 = StreamState::empty(theta, mask);
        let s1 = update_stream_state(&s0, &grads, &tape, &Decays::default());
        update_stream_state(&s1, &grads, &tape, &Decays::default())
    }

    #[test]
    fn stream_update_edge_cases() {
        let (theta, h, y) = random_instance(7, 5, 4, 6, 5);
        let (tape, _) = slow_forward(&theta, &h, &y).unwrap();
        let grads = per_position_grads(&theta, &tape, &y).unwrap();
        let prior = stream_of(&theta, FastMask::ALL, 70);

        // γ = 0: only the current segment's sums remain
        let zero = Decays::uniform(0.0);
        let next = update_stream_state(&prior, &grads, &tape, &zero);
        for t in HeadTensor::ALL {
            let eff = next.effective(t, &zero).unwrap();
            let mut want = Matrix::zeros(eff.rows(), eff.cols());
            for i in 0..5 {
                want.add_assign(&position_gradient(&tape, &grads, i, t));
            }
            assert!(eff.max_abs_diff(&want) < 1e-12);
        }

        // γ = 1 with zero gradients: effective delta unchanged
        let one = Decays::uniform(1.0);
        let mut zero_grads = grads.clone();
        for m in [
            &mut zero_grads.g_logits,
            &mut zero_grads.g_u,
            &mut zero_grads.g_lngain,
            &mut zero_grads.g_o,
            &mut zero_grads.g_z,
        ] {
            m.scale(0.0);
        }
        let next = update_stream_state(&prior, &zero_grads, &tape, &one);
        for t in HeadTensor::ALL {
            assert_eq!(next.effective(t, &one), prior.effective(t, &one));
        }
    }

    #[test]
    fn stream_shape_mismatch_is_a_state_error() {
        let (theta, h, y) = random_instance(8, 4, 4, 6, 5);
        let other = HeadParams::init(4, 7, 5, 0);
        let state = StreamState::empty(&other, FastMask::ALL);
        let (tape, _) = slow_forward(&theta, &h, &y).unwrap();
        let grads = per_position_grads(&theta, &tape, &y).unwrap();
        let decays = Decays::default();
        let err = fast_forward(
            &theta,
            &StepSizes::new(FastMask::ALL),
            &tape,
            &grads,
            Some(Stream { state: &state, decays: &decays }),
            4,
        );
        assert!(matches!(err, Err(FwlError::State(_))));
    }

    /// Σ_t w_t L'_t as a function of a flat parameter vector, for gradient checks.
    struct Objective {
        theta: HeadParams,
        steps: StepSizes,
        decays: Decays,
        h: Matrix,
        y: Vec<usize>,
        weights: Vec<f64>,
        state: Option<StreamState>,
    }

    impl Objective {
        fn flat(&self) -> Vec<f64> {
            let mut v = self.theta.flatten();
            v.extend_from_slice(&self.steps.alpha);
            v.extend_from_slice(&self.decays.logit);
            v.extend_from_slice(self.h.data());
            v
        }

        fn unpack(&self, x: &[f64]) -> (HeadParams, StepSizes, Decays, Matrix) {
            let n = self.theta.num_params();
            let mut th = self.theta.clone();
            th.unflatten(&x[..n]);
            let mut st = self.steps.clone();
            st.alpha.copy_from_slice(&x[n..n + 8]);
            let mut de = self.decays.clone();
            de.logit.copy_from_slice(&x[n + 8..n + 16]);
            let h = Matrix::from_vec(self.h.rows(), self.h.cols(), x[n + 16..].to_vec()).unwrap();
            (th, st, de, h)
        }

        fn value(&self, x: &[f64]) -> f64 {
            let (th, st, de, h) = self.unpack(x);
            let stream = self.state.as_ref().map(|s| Stream { state: s, decays: &de });
            let (_, _, f) = score_fast(&th, &st, &h, &self.y, stream).unwrap();
            f.losses.iter().zip(&self.weights).map(|(l, w)| l * w).sum()
        }

        fn grad(&self, order: GradOrder) -> Vec<f64> {
            let stream = self.state.as_ref().map(|s| Stream { state: s, decays: &self.decays });
            let (tape, grads, f) = score_fast(&self.theta, &self.steps, &self.h, &self.y, stream).unwrap();
            let b = fast_backward(&self.theta, &self.steps, &tape, &grads, stream, &f, &self.weights, order).unwrap();
            let mut g = b.d_head.flatten();
            g.extend(b.d_alpha.iter().map(|a| a.unwrap_or(0.0)));
            g.extend(b.d_decay_logit.iter().map(|a| a.unwrap_or(0.0)));
            g.extend_from_slice(b.d_h.data());
            g
        }
    }

    fn objective(seed: u64, mask: FastMask, streaming: bool) -> Objective {
        let (theta, h, y) = random_instance(seed, 7, 6, 9, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let state = streaming.then(|| stream_of(&theta, mask, seed + 2));
        Objective {
            steps: random_steps(seed, mask),
            decays: Decays::uniform(0.8),
            weights: (0..7).map(|_| rng.random_range(0.5..1.5)).collect(),
            theta,
            h,
            y,
            state,
        }
    }

    fn directional_check(obj: &Objective, seed: u64) -> f64 {
        let x = obj.flat();
        let g = obj.grad(GradOrder::Second);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let dir: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eps = 1e-5;
            let shift = |s: f64| -> Vec<f64> { x.iter().zip(&dir).map(|(a, b)| a + s * b).collect() };
            let fd = (obj.value(&shift(eps)) - obj.value(&shift(-eps))) / (2.0 * eps);
            let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            worst = worst.max(rel_err(an, fd));
        }
        worst
    }

    #[test]
    fn second_order_gradient_matches_finite_differences() {
        for (i, mask) in [FastMask::ALL, FastMask::MATRICES, FastMask::VECTORS, FastMask::BIAS_ONLY]
            .into_iter()
            .enumerate()
        {
            let err = directional_check(&objective(10 + i as u64, mask, false), 1);
            assert!(err < 1e-6, "mask {mask}: rel err {err}");
        }
    }

    #[test]
    fn streaming_gradient_matches_finite_differences() {
        let obj = objective(20, FastMask::ALL, true);
        let err = directional_check(&obj, 2);
        assert!(err < 1e-6, "rel err {err}");
        // decays get a gradient, and it is exact
        let g = obj.grad(GradOrder::Second);
        let n = obj.theta.num_params();
        assert!(g[n + 8..n + 16].iter().all(|v| *v != 0.0));
    }

    #[test]
    fn first_order_differs_from_second_order() {
        let obj = objective(30, FastMask::ALL, false);
        let g2 = obj.grad(GradOrder::Second);
        let g1 = obj.grad(GradOrder::First);
        let diff: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = g2.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm > 1e-3, "relative difference {}", diff / norm);
    }

    #[test]
    fn unmasked_alphas_have_no_gradient() {
        let obj = objective(40, FastMask::MATRICES, false);
        let (tape, grads, f) = score_fast(&obj.theta, &obj.steps, &obj.h, &obj.y, None).unwrap();
        let b = fast_backward(&obj.theta, &obj.steps, &tape, &grads, None, &f, &obj.weights, GradOrder::Second).unwrap();
        for t in HeadTensor::ALL {
            assert_eq!(b.d_alpha[t.index()].is_some(), t.is_matrix());
        }
        assert!(b.d_alpha[HeadTensor::W.index()].unwrap() != 0.0);
    }

    #[test]
    fn slow_backward_matches_finite_differences() {
        let (theta, h, y) = random_instance(50, 5, 6, 8, 5);
        let w = vec![0.5, 1.0, 1.5, 0.2, 0.8];
        let (tape, _) = slow_forward(&theta, &h, &y).unwrap();
        let grads = per_position_grads(&theta, &tape, &y).unwrap();
        let (dth, dh) = slow_backward(&theta, &tape, &grads, &w);
        let f = |x: &[f64]| {
            let mut th = theta.clone();
            th.unflatten(x);
            slow_forward(&th, &h, &y).unwrap().1.iter().zip(&w).map(|(l, a)| l * a).sum::<f64>()
        };
        let fd = finite_diff_grad(f, &theta.flatten(), 1e-5);
        for (a, b) in dth.flatten().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let fh = |x: &[f64]| {
            let hh = Matrix::from_vec(5, 6, x.to_vec()).unwrap();
            slow_forward(&theta, &hh, &y).unwrap().1.iter().zip(&w).map(|(l, a)| l * a).sum::<f64>()
        };
        let fdh = finite_diff_grad(fh, h.data(), 1e-5);
        for (a, b) in dh.data().iter().zip(&fdh) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sampling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_token(&[1.0, 1.0, 0.5], 0.0, &mut rng), 0);
        assert_eq!(sample_token(&[0.0, 3.0, 3.0], 0.0, &mut rng), 1);
        let mut counts = [0usize; 2];
        for _ in 0..2000 {
            counts[sample_token(&[0.0, 0.0], 1.0, &mut rng)] += 1;
        }
        assert!(counts[0] > 800 && counts[1] > 800);
    }

    #[test]
    fn generation_matches_teacher_forced_scoring() {
        let (theta, h, _) = random_instance(60, 12, 6, 9, 5);
        let steps = random_steps(60, FastMask::ALL);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut offsets = FastOffsets::new(&theta, steps.mask);
        let mut tokens = Vec::new();
        let mut gen_losses = Vec::new();
        for t in 0..12 {
            let s = generate_step(&theta, &steps, &offsets, h.row(t), 1.0, &mut rng).unwrap();
            tokens.push(s.token);
            gen_losses.push(s.loss);
            offsets = s.offsets;
        }
        let (_, _, f) = score_fast(&theta, &steps, &h, &tokens, None).unwrap();
        for (a, b) in f.losses.iter().zip(&gen_losses) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_alpha_generation_equals_slow_sampling() {
        let (theta, h, _) = random_instance(61, 10, 6, 9, 5);
        let steps = StepSizes::uniform(FastMask::ALL, 0.0);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let mut offsets = FastOffsets::new(&theta, steps.mask);
        for t in 0..10 {
            let s = generate_step(&theta, &steps, &offsets, h.row(t), 0.8, &mut r1).unwrap();
            offsets = s.offsets;
            let slow = sample_token(&head_logits(&theta, h.row(t)), 0.8, &mut r2);
            assert_eq!(s.token, slow);
        }
    }
}
