//! Exact causal linear attention (no softmax, no feature map).
//!
//! Output row `t` is `q_t · (S₀ + Σ_{i<t} k_iᵀ v_i)` where `S₀` is an optional
//! carried-in key/value state. The mask is strict: position `t` never sees
//! its own key/value pair.

use crate::error::{FwlError, Result};
use crate::numerics::{dot, mm, mm_nt, mm_tn, Matrix};

pub const DEFAULT_CHUNK: usize = 64;

/// Accumulated `Σ kᵢᵀ vᵢ` over consumed positions (key-dim × value-dim).
#[derive(Clone, Debug, PartialEq)]
pub struct KVState {
    pub accumulator: Matrix,
}

impl KVState {
    pub fn zeros(key_dim: usize, value_dim: usize) -> Self {
        KVState {
            accumulator: Matrix::zeros(key_dim, value_dim),
        }
    }

    pub fn add(&self, other: &KVState) -> KVState {
        let mut acc = self.accumulator.clone();
        acc.add_assign(&other.accumulator);
        KVState { accumulator: acc }
    }
}

fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix, init: Option<&KVState>) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(FwlError::Shape {
            op: "linear_attention(q, k)",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if k.rows() != v.rows() || q.rows() != k.rows() {
        return Err(FwlError::Shape {
            op: "linear_attention(k, v)",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    if let Some(s) = init {
        if s.accumulator.shape() != (k.cols(), v.cols()) {
            return Err(FwlError::Shape {
                op: "linear_attention(init)",
                lhs: s.accumulator.shape(),
                rhs: (k.cols(), v.cols()),
            });
        }
    }
    Ok(())
}

/// Strictly-lower-triangular `(Q Kᵀ) V` plus `Q · init`, accumulated into `out`.
fn masked_block(q: &Matrix, k: &Matrix, v: &Matrix, out: &mut Matrix, row_offset: usize) {
    let scores = mm_nt(q, k);
    for t in 0..q.rows() {
        let orow = out.row_mut(row_offset + t);
        for i in 0..t {
            let s = scores[(t, i)];
            if s == 0.0 {
                continue;
            }
            for (o, vv) in orow.iter_mut().zip(v.row(i)) {
                *o += s * vv;
            }
        }
    }
}

/// O(T²) reference: full masked score matrix.
pub fn causal_linear_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    init: Option<&KVState>,
) -> Result<(Matrix, KVState)> {
    check_shapes(q, k, v, init)?;
    let mut out = match init {
        Some(s) => mm(q, &s.accumulator),
        None => Matrix::zeros(q.rows(), v.cols()),
    };
    masked_block(q, k, v, &mut out, 0);
    let mut acc = mm_tn(k, v);
    if let Some(s) = init {
        acc.add_assign(&s.accumulator);
    }
    Ok((out, KVState { accumulator: acc }))
}

/// Mixed-chunk exact causal linear attention.
///
/// Within a chunk the masked quadratic form is used; across chunks each query
/// reads the prefix state of all earlier chunks. The last chunk may be short.
pub fn chunked_causal_linear_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    chunk_size: usize,
    init: Option<&KVState>,
) -> Result<(Matrix, KVState)> {
    if chunk_size == 0 {
        return Err(FwlError::config("chunk_size", "must be at least 1"));
    }
    check_shapes(q, k, v, init)?;
    let t_len = q.rows();
    if chunk_size >= t_len {
        return causal_linear_attention(q, k, v, init);
    }
    let mut state = match init {
        Some(s) => s.accumulator.clone(),
        None => Matrix::zeros(k.cols(), v.cols()),
    };
    let mut out = Matrix::zeros(t_len, v.cols());
    let mut start = 0;
    while start < t_len {
        let end = (start + chunk_size).min(t_len);
        let qc = q.slice_rows(start, end);
        let kc = k.slice_rows(start, end);
        let vc = v.slice_rows(start, end);
        let inter = mm(&qc, &state);
        for t in 0..qc.rows() {
            out.row_mut(start + t).copy_from_slice(inter.row(t));
        }
        masked_block(&qc, &kc, &vc, &mut out, start);
        state.add_assign(&mm_tn(&kc, &vc));
        start = end;
    }
    Ok((out, KVState { accumulator: state }))
}

fn reverse_rows(m: &Matrix) -> Matrix {
    let mut r = Matrix::zeros(m.rows(), m.cols());
    for t in 0..m.rows() {
        r.row_mut(m.rows() - 1 - t).copy_from_slice(m.row(t));
    }
    r
}

/// Row `i` is `Σ_{t>i} (q_i · k_t) v_t` (strict future mask).
pub fn anticausal_linear_attention(q: &Matrix, k: &Matrix, v: &Matrix, chunk_size: usize) -> Result<Matrix> {
    let (o, _) = chunked_causal_linear_attention(
        &reverse_rows(q),
        &reverse_rows(k),
        &reverse_rows(v),
        chunk_size,
        None,
    )?;
    Ok(reverse_rows(&o))
}

/// Gradients of `<dO, causal_linear_attention(q, k, v, init)>`.
#[derive(Clone, Debug)]
pub struct LinearAttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    pub dinit: Matrix,
}

pub fn linear_attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    init: Option<&KVState>,
    d_out: &Matrix,
    chunk_size: usize,
) -> Result<LinearAttentionGrads> {
    check_shapes(q, k, v, init)?;
    // dq_t = dO_t (S0 + Σ_{i<t} k_iᵀ v_i)ᵀ = causal(dO, V, K, S0ᵀ)
    let init_t = init.map(|s| KVState {
        accumulator: s.accumulator.transpose(),
    });
    let (dq, _) = chunked_causal_linear_attention(d_out, v, k, chunk_size, init_t.as_ref())?;
    // dk_i = Σ_{t>i} (v_i · dO_t) q_t
    let dk = anticausal_linear_attention(v, d_out, q, chunk_size)?;
    // dv_i = Σ_{t>i} (k_i · q_t) dO_t
    let dv = anticausal_linear_attention(k, q, d_out, chunk_size)?;
    let dinit = mm_tn(q, d_out);
    Ok(LinearAttentionGrads { dq, dk, dv, dinit })
}

/// FLOPs (multiply-adds counted as 2) of the quadratic kernel.
pub fn quadratic_flops(t: usize, key_dim: usize, value_dim: usize) -> u64 {
    let t = t as u64;
    let (dk, dv) = (key_dim as u64, value_dim as u64);
    // scores (strict lower triangle) + weighted sum of values
    let pairs = t * t.saturating_sub(1) / 2;
    2 * pairs * dk + 2 * pairs * dv
}

/// FLOPs of the chunked kernel with chunk size `c`.
pub fn chunked_flops(t: usize, key_dim: usize, value_dim: usize, c: usize) -> u64 {
    if c >= t {
        return quadratic_flops(t, key_dim, value_dim);
    }
    let mut total = 0u64;
    let mut start = 0;
    let (dk, dv) = (key_dim as u64, value_dim as u64);
    while start < t {
        let len = (c.min(t - start)) as u64;
        total += quadratic_flops(len as usize, key_dim, value_dim);
        // prefix read + state update
        total += 2 * len * dk * dv * 2;
        start += c;
    }
    total
}

/// Single-row helper: `q · S`.
pub fn query_state(q: &[f64], state: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; state.cols()];
    for (p, &qp) in q.iter().enumerate() {
        for (o, s) in out.iter_mut().zip(state.row(p)) {
            *o += qp * s;
        }
    }
    out
}

/// Strict-causal score `q_t · k_i` for a single pair; used by tests and analysis.
pub fn score(q: &[f64], k: &[f64]) -> f64 {
    dot(q, k)
}
