//! Dense row-major matrices and the closed-form forward/backward primitives
//! the model gradients are assembled from.
//!
//! Everything here is `f64`. Vectors are plain `Vec<f64>` / `&[f64]`.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{FwlError, Result};

/// LayerNorm epsilon used throughout the crate.
pub const LN_EPS: f64 = 1e-5;

pub type Vector = Vec<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FwlError::Shape {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A 1 × n matrix holding `v`.
    pub fn row_vector(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so guard the degenerate width.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(FwlError::Shape {
                op: "vstack",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Checked product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s * other`. Panics on shape mismatch.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        self.axpy(1.0, other);
    }

    /// Adds `v` to every row.
    pub fn add_row_broadcast(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.cols, "broadcast length mismatch");
        for r in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, b) in r.iter_mut().zip(v) {
                *a += b;
            }
        }
    }

    pub fn col_sums(&self) -> Vector {
        let mut s = vec![0.0; self.cols];
        for r in self.rows_iter() {
            for (a, b) in s.iter_mut().zip(r) {
                *a += b;
            }
        }
        s
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Checked matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(FwlError::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(mm(a, b))
}

const BLOCK: usize = 64;

/// `A · B`, panicking on mismatch. Blocked over the inner dimension so the
/// active panel of `B` stays in cache.
pub fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "mm: {:?} x {:?}", a.shape(), b.shape());
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut c = Matrix::zeros(n, m);
    if m == 0 {
        return c;
    }
    for k0 in (0..k).step_by(BLOCK) {
        let k1 = (k0 + BLOCK).min(k);
        for i in 0..n {
            let arow = &a.data[i * k..(i + 1) * k];
            let crow = &mut c.data[i * m..(i + 1) * m];
            for p in k0..k1 {
                let aip = arow[p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b.data[p * m..(p + 1) * m];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }
    c
}

/// `Aᵀ · B` without materializing the transpose.
pub fn mm_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "mm_tn: {:?} x {:?}", a.shape(), b.shape());
    let (n, k, m) = (a.cols, a.rows, b.cols);
    let mut c = Matrix::zeros(n, m);
    for p in 0..k {
        let arow = &a.data[p * n..(p + 1) * n];
        let brow = &b.data[p * m..(p + 1) * m];
        for (i, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c.data[i * m..(i + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `A · Bᵀ` without materializing the transpose.
pub fn mm_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "mm_nt: {:?} x {:?}", a.shape(), b.shape());
    let (n, m) = (a.rows, b.rows);
    let mut c = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            c.data[i * m + j] = dot(arow, b.row(j));
        }
    }
    c
}

/// Row vector times matrix: `x · B`.
pub fn vecmat(x: &[f64], b: &Matrix) -> Vector {
    assert_eq!(x.len(), b.rows, "vecmat length mismatch");
    let mut out = vec![0.0; b.cols];
    for (p, &xp) in x.iter().enumerate() {
        if xp == 0.0 {
            continue;
        }
        for (o, bv) in out.iter_mut().zip(b.row(p)) {
            *o += xp * bv;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `M += xᵀ y` (rank-one update).
pub fn add_outer(m: &mut Matrix, s: f64, x: &[f64], y: &[f64]) {
    assert_eq!((x.len(), y.len()), m.shape(), "outer shape mismatch");
    for (i, &xi) in x.iter().enumerate() {
        let f = s * xi;
        if f == 0.0 {
            continue;
        }
        for (a, b) in m.row_mut(i).iter_mut().zip(y) {
            *a += f * b;
        }
    }
}

/// Squared ReLU. Returns the activation and its elementwise derivative `2·max(x, 0)`.
pub fn relu2(x: &[f64]) -> (Vector, Vector) {
    let y = x.iter().map(|&v| v.max(0.0) * v.max(0.0)).collect();
    let mask = x.iter().map(|&v| 2.0 * v.max(0.0)).collect();
    (y, mask)
}

pub fn relu2_scalar(v: f64) -> f64 {
    let r = v.max(0.0);
    r * r
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormCache {
    /// `(x - mean) * inv_std`
    pub xhat: Vector,
    pub mean: f64,
    pub inv_std: f64,
    pub gain: Vector,
}

/// Normalizes `x` to zero mean / unit variance only; returns `(xhat, inv_std)`.
pub fn normalize(x: &[f64], eps: f64) -> (Vector, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub fn layernorm_fwd(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> (Vector, LayerNormCache) {
    assert!(gain.len() == x.len() && bias.len() == x.len(), "layernorm length mismatch");
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (xhat, inv_std) = normalize(x, eps);
    let y = xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(h, (g, b))| h * g + b)
        .collect();
    (
        y,
        LayerNormCache {
            xhat,
            mean,
            inv_std,
            gain: gain.to_vec(),
        },
    )
}

/// Backward through the normalization alone: given `d xhat`, returns `dx`.
pub fn normalize_bwd(xhat: &[f64], inv_std: f64, dxhat: &[f64]) -> Vector {
    let n = xhat.len() as f64;
    let m1 = dxhat.iter().sum::<f64>() / n;
    let m2 = dot(dxhat, xhat) / n;
    dxhat
        .iter()
        .zip(xhat)
        .map(|(d, h)| inv_std * (d - m1 - h * m2))
        .collect()
}

/// Returns `(dx, dgain, dbias)`.
pub fn layernorm_bwd(cache: &LayerNormCache, dy: &[f64]) -> (Vector, Vector, Vector) {
    let dxhat: Vector = dy.iter().zip(&cache.gain).map(|(d, g)| d * g).collect();
    let dx = normalize_bwd(&cache.xhat, cache.inv_std, &dxhat);
    let dgain = dy.iter().zip(&cache.xhat).map(|(d, h)| d * h).collect();
    (dx, dgain, dy.to_vec())
}

/// Row-wise LayerNorm cache: normalized rows and per-row inverse std.
#[derive(Clone, Debug)]
pub struct LayerNormRows {
    pub xhat: Matrix,
    pub inv_std: Vector,
}

/// Applies LayerNorm to every row of `x` with a shared gain/bias.
pub fn layernorm_rows(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LayerNormRows) {
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let (h, r) = normalize(x.row(t), LN_EPS);
        for (j, yv) in y.row_mut(t).iter_mut().enumerate() {
            *yv = h[j] * gain[j] + bias[j];
        }
        xhat.row_mut(t).copy_from_slice(&h);
        inv_std.push(r);
    }
    (y, LayerNormRows { xhat, inv_std })
}

/// Backward of [`layernorm_rows`]; returns `(dx, dgain, dbias)` with the
/// parameter gradients summed over rows.
pub fn layernorm_rows_bwd(cache: &LayerNormRows, gain: &[f64], dy: &Matrix) -> (Matrix, Vector, Vector) {
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    let mut dgain = vec![0.0; dy.cols()];
    let mut dbias = vec![0.0; dy.cols()];
    for t in 0..dy.rows() {
        let h = cache.xhat.row(t);
        let d = dy.row(t);
        let dxhat: Vector = d.iter().zip(gain).map(|(a, g)| a * g).collect();
        dx.row_mut(t)
            .copy_from_slice(&normalize_bwd(h, cache.inv_std[t], &dxhat));
        for j in 0..d.len() {
            dgain[j] += d[j] * h[j];
            dbias[j] += d[j];
        }
    }
    (dx, dgain, dbias)
}

/// Softmax probabilities with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vector {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vector = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// `log Σ exp(logits)`, stabilized.
pub fn logsumexp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of `target` under `softmax(logits)` and its gradient
/// `softmax(logits) - onehot(target)`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vector)> {
    if target >= logits.len() {
        return Err(FwlError::Index {
            index: target,
            len: logits.len(),
        });
    }
    let loss = logsumexp(logits) - logits[target];
    let mut d = softmax(logits);
    d[target] -= 1.0;
    Ok((loss.max(0.0), d))
}

/// Row `t` of the output is `Σ_{i<t} G[i]`; row 0 is zero.
pub fn exclusive_cumsum_rows(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(g.rows, g.cols);
    let mut acc = vec![0.0; g.cols];
    for t in 0..g.rows {
        out.row_mut(t).copy_from_slice(&acc);
        for (a, v) in acc.iter_mut().zip(g.row(t)) {
            *a += v;
        }
    }
    out
}

/// Adjoint of [`exclusive_cumsum_rows`]: row `i` is `Σ_{t>i} D[t]`.
pub fn reverse_exclusive_cumsum_rows(d: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(d.rows, d.cols);
    let mut acc = vec![0.0; d.cols];
    for t in (0..d.rows).rev() {
        out.row_mut(t).copy_from_slice(&acc);
        for (a, v) in acc.iter_mut().zip(d.row(t)) {
            *a += v;
        }
    }
    out
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vector {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + eps;
            let fp = f(&xp);
            xp[i] = orig - eps;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// `max |a - b| / max(|b|, floor)` style relative error used by the gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matmul_cases() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[[11.0]]));
        assert_eq!(matmul(&Matrix::zeros(2, 2), &m).unwrap(), Matrix::zeros(2, 2));
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("(1, 2)"), "{err}");
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::from_vec(5, 70, rand_vec(&mut rng, 350)).unwrap();
        let b = Matrix::from_vec(5, 3, rand_vec(&mut rng, 15)).unwrap();
        let c = Matrix::from_vec(4, 70, rand_vec(&mut rng, 280)).unwrap();
        assert!(mm_tn(&a, &b).max_abs_diff(&mm(&a.transpose(), &b)) < 1e-12);
        assert!(mm_nt(&a, &c).max_abs_diff(&mm(&a, &c.transpose())) < 1e-12);
    }

    #[test]
    fn relu2_cases() {
        let (y, m) = relu2(&[-1.0, 0.0, 2.0]);
        assert_eq!(y, vec![0.0, 0.0, 4.0]);
        assert_eq!(m, vec![0.0, 0.0, 4.0]);
        let (y, _) = relu2(&[-3.0, -0.5]);
        assert_eq!(y, vec![0.0, 0.0]);
        let fd = finite_diff_grad(|x| relu2_scalar(x[0]), &[1.5], 1e-5);
        assert!((fd[0] - relu2(&[1.5]).1[0]).abs() < 1e-6);
    }

    #[test]
    fn layernorm_forward_cases() {
        let (y, _) = layernorm_fwd(&[5.0, 5.0, 5.0], &[1.0; 3], &[0.0; 3], LN_EPS);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        let (y, _) = layernorm_fwd(&[-1.0, 1.0], &[1.0; 2], &[0.0; 2], LN_EPS);
        assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_vec(&mut rng, 8);
        let gain = rand_vec(&mut rng, 8);
        let bias = rand_vec(&mut rng, 8);
        let w = rand_vec(&mut rng, 8);
        let (_, cache) = layernorm_fwd(&x, &gain, &bias, LN_EPS);
        let (dx, dgain, dbias) = layernorm_bwd(&cache, &w);

        let fx = |xx: &[f64]| dot(&layernorm_fwd(xx, &gain, &bias, LN_EPS).0, &w);
        let fg = |gg: &[f64]| dot(&layernorm_fwd(&x, gg, &bias, LN_EPS).0, &w);
        let fb = |bb: &[f64]| dot(&layernorm_fwd(&x, &gain, bb, LN_EPS).0, &w);
        for (an, fd) in [
            (&dx, finite_diff_grad(fx, &x, 1e-5)),
            (&dgain, finite_diff_grad(fg, &gain, 1e-5)),
            (&dbias, finite_diff_grad(fb, &bias, 1e-5)),
        ] {
            for (a, f) in an.iter().zip(&fd) {
                assert!((a - f).abs() < 1e-6, "{a} vs {f}");
            }
        }
    }

    #[test]
    fn layernorm_backward_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_vec(&mut rng, 6);
        let (_, cache) = layernorm_fwd(&x, &[1.0; 6], &[0.0; 6], LN_EPS);
        let (dx, dg, db) = layernorm_bwd(&cache, &[0.0; 6]);
        assert!(dx.iter().chain(&dg).chain(&db).all(|&v| v == 0.0));

        let dy = rand_vec(&mut rng, 6);
        let (dx, dg, _) = layernorm_bwd(&cache, &dy);
        for i in 0..6 {
            assert_eq!(dg[i], dy[i] * cache.xhat[i]);
        }
        assert!(dx.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn softmax_xent_cases() {
        let (l, d) = softmax_xent(&[0.0, 0.0], 0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d, vec![-0.5, 0.5]);
        let (l, d) = softmax_xent(&[1000.0, 0.0], 0).unwrap();
        assert!(l.abs() < 1e-12 && d.iter().all(|v| v.is_finite()));
        assert!(matches!(
            softmax_xent(&[0.0], 1),
            Err(FwlError::Index { index: 1, len: 1 })
        ));
    }

    #[test]
    fn cumsum_cases() {
        let g = Matrix::from_rows(&[[1.0], [2.0], [3.0]]);
        assert_eq!(
            exclusive_cumsum_rows(&g),
            Matrix::from_rows(&[[0.0], [1.0], [3.0]])
        );
        assert_eq!(
            exclusive_cumsum_rows(&Matrix::from_rows(&[[4.0, 5.0]])),
            Matrix::zeros(1, 2)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Matrix::from_vec(9, 4, rand_vec(&mut rng, 36)).unwrap();
        let c = exclusive_cumsum_rows(&g);
        let sums = g.col_sums();
        for j in 0..4 {
            assert!((c[(8, j)] + g[(8, j)] - sums[j]).abs() < 1e-12);
        }
        // adjointness: <cumsum(G), D> = <G, rcumsum(D)>
        let d = Matrix::from_vec(9, 4, rand_vec(&mut rng, 36)).unwrap();
        let lhs = c.dot(&d);
        let rhs = g.dot(&reverse_exclusive_cumsum_rows(&d));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_cases() {
        let x = vec![0.3, -1.2, 2.0];
        let g = finite_diff_grad(|v| v.iter().sum(), &x, 1e-5);
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let g = finite_diff_grad(|v| dot(v, v) / 2.0, &x, 1e-5);
        for (a, b) in g.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn xent_bounds(logits in proptest::collection::vec(-30.0f64..30.0, 2..16), t in 0usize..16) {
                let t = t % logits.len();
                let (l, d) = softmax_xent(&logits, t).unwrap();
                prop_assert!(l >= 0.0);
                prop_assert!(d.iter().sum::<f64>().abs() < 1e-12);
                prop_assert!(d.iter().all(|v| *v > -1.0 && *v < 1.0 || (v.abs() - 1.0).abs() < 1e-12));
            }

            #[test]
            fn cumsum_splits(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..20), split in 1usize..19) {
                let split = split.min(rows.len() - 1);
                let g = Matrix::from_rows(&rows);
                let whole = exclusive_cumsum_rows(&g);
                let a = g.slice_rows(0, split);
                let b = g.slice_rows(split, g.rows());
                let mut tail = exclusive_cumsum_rows(&b);
                tail.add_row_broadcast(&a.col_sums());
                prop_assert!(whole.slice_rows(split, g.rows()).max_abs_diff(&tail) < 1e-12);
            }

            #[test]
            fn layernorm_bwd_vs_fd(x in proptest::collection::vec(-3.0f64..3.0, 2..16), seed in 0u64..1000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = x.len();
                let gain = rand_vec(&mut rng, n);
                let w = rand_vec(&mut rng, n);
                let (_, cache) = layernorm_fwd(&x, &gain, &vec![0.0; n], LN_EPS);
                let (dx, _, _) = layernorm_bwd(&cache, &w);
                let fd = finite_diff_grad(|xx| dot(&layernorm_fwd(xx, &gain, &vec![0.0; n], LN_EPS).0, &w), &x, 1e-5);
                for (a, f) in dx.iter().zip(&fd) {
                    prop_assert!((a - f).abs() <= 1e-5 * a.abs().max(f.abs()).max(1.0));
                }
            }
        }
    }
}
