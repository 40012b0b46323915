//! Naive sequential reference for the fast pass.
//!
//! Walks positions one at a time with a materialized copy of the fast
//! weights. Every forward and backward step is written out as scalar loops;
//! nothing here touches the linear-attention kernels, the cumsum helpers or
//! the rank-one shortcut, so agreement with [`crate::layer::fast_forward`] is
//! real evidence.

use crate::error::{FwlError, Result};
use crate::layer::{HeadParams, HeadTensor, StepSizes};
use crate::numerics::{Matrix, LN_EPS};

struct Forward {
    z: Vec<f64>,
    v: Vec<f64>,
    xhat: Vec<f64>,
    rstd: f64,
    u: Vec<f64>,
    probs: Vec<f64>,
    loss: f64,
}

fn forward(p: &HeadParams, h: &[f64], target: usize) -> Forward {
    let d = p.u.rows();
    let dh = p.u.cols();
    let vocab = p.e.cols();

    let mut z = vec![0.0; dh];
    for j in 0..dh {
        let mut s = p.a[j];
        for i in 0..d {
            s += h[i] * p.u[(i, j)];
        }
        z[j] = s;
    }
    let v: Vec<f64> = z.iter().map(|&x| if x > 0.0 { x * x } else { 0.0 }).collect();

    let mut x = vec![0.0; d];
    for k in 0..d {
        let mut s = p.b[k];
        for j in 0..dh {
            s += v[j] * p.w[(j, k)];
        }
        x[k] = s;
    }
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|xi| (xi - mean) * (xi - mean)).sum::<f64>() / d as f64;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|xi| (xi - mean) * rstd).collect();
    let u: Vec<f64> = (0..d).map(|k| xhat[k] * p.ln_gain[k] + p.ln_bias[k]).collect();

    let mut logits = vec![0.0; vocab];
    for m in 0..vocab {
        let mut s = p.c[m];
        for k in 0..d {
            s += u[k] * p.e[(k, m)];
        }
        logits[m] = s;
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / total).collect();
    let loss = mx + total.ln() - logits[target];
    Forward {
        z,
        v,
        xhat,
        rstd,
        u,
        probs,
        loss,
    }
}

/// Full gradient of one position's loss with respect to every head tensor.
fn gradient(p: &HeadParams, h: &[f64], target: usize) -> HeadParams {
    let f = forward(p, h, target);
    let d = p.u.rows();
    let dh = p.u.cols();
    let vocab = p.e.cols();
    let mut g = p.clone();

    let mut dlogits = f.probs.clone();
    dlogits[target] -= 1.0;
    for m in 0..vocab {
        g.c[m] = dlogits[m];
    }
    let mut du = vec![0.0; d];
    let mut e = Matrix::zeros(d, vocab);
    for k in 0..d {
        for m in 0..vocab {
            e.data_mut()[k * vocab + m] = f.u[k] * dlogits[m];
            du[k] += p.e[(k, m)] * dlogits[m];
        }
    }
    g.e = e;

    let mut dxhat = vec![0.0; d];
    for k in 0..d {
        g.ln_bias[k] = du[k];
        g.ln_gain[k] = du[k] * f.xhat[k];
        dxhat[k] = du[k] * p.ln_gain[k];
    }
    let nd = d as f64;
    let mean_dxhat = dxhat.iter().sum::<f64>() / nd;
    let mean_proj = (0..d).map(|k| dxhat[k] * f.xhat[k]).sum::<f64>() / nd;
    let dx: Vec<f64> = (0..d)
        .map(|k| f.rstd * (dxhat[k] - mean_dxhat - f.xhat[k] * mean_proj))
        .collect();

    let mut dv = vec![0.0; dh];
    let mut w = Matrix::zeros(dh, d);
    for j in 0..dh {
        for k in 0..d {
            w.data_mut()[j * d + k] = f.v[j] * dx[k];
            dv[j] += p.w[(j, k)] * dx[k];
        }
    }
    g.w = w;
    g.b = dx;

    let dz: Vec<f64> = (0..dh)
        .map(|j| if f.z[j] > 0.0 { dv[j] * 2.0 * f.z[j] } else { 0.0 })
        .collect();
    let mut u = Matrix::zeros(d, dh);
    for i in 0..d {
        for j in 0..dh {
            u.data_mut()[i * dh + j] = h[i] * dz[j];
        }
    }
    g.u = u;
    g.a = dz;
    g
}

/// Per-position losses `L'_t` computed by materializing θ'_t at every step.
///
/// θ' starts at θ; after scoring position t with θ', the slow-weight gradient
/// of `L_t` is subtracted (scaled by α) for every masked tensor.
pub fn sequential_fast_forward(
    theta: &HeadParams,
    steps: &StepSizes,
    h: &Matrix,
    targets: &[usize],
) -> Result<Vec<f64>> {
    if h.cols() != theta.u.rows() {
        return Err(FwlError::Shape {
            op: "sequential_fast_forward",
            lhs: h.shape(),
            rhs: theta.u.shape(),
        });
    }
    if targets.len() != h.rows() {
        return Err(FwlError::Shape {
            op: "sequential_fast_forward(targets)",
            lhs: h.shape(),
            rhs: (targets.len(), 1),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= theta.e.cols()) {
        return Err(FwlError::Index {
            index: bad,
            len: theta.e.cols(),
        });
    }
    let mut fast = theta.clone();
    let mut losses = Vec::with_capacity(targets.len());
    for (t, &y) in targets.iter().enumerate() {
        let row = h.row(t);
        losses.push(forward(&fast, row, y).loss);
        let g = gradient(theta, row, y);
        for tensor in steps.mask.iter() {
            let alpha = steps.alpha[tensor.index()];
            for (w, gi) in fast.tensor_mut(tensor).iter_mut().zip(g.tensor(tensor)) {
                *w -= alpha * gi;
            }
        }
    }
    Ok(losses)
}

/// Loss of a single position under explicit weights.
pub fn position_loss(p: &HeadParams, h: &[f64], target: usize) -> f64 {
    forward(p, h, target).loss
}

/// Full-matrix gradient of a single position's loss, by scalar loops.
pub fn position_gradient(p: &HeadParams, h: &[f64], target: usize, tensor: HeadTensor) -> Vec<f64> {
    gradient(p, h, target).tensor(tensor).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{slow_forward, FastMask};
    use crate::numerics::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, t: usize) -> (HeadParams, Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = HeadParams::init(5, 7, 4, seed);
        let h = Matrix::from_vec(t, 5, (0..t * 5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = (0..t).map(|_| rng.random_range(0..4)).collect();
        (theta, h, y)
    }

    #[test]
    fn zero_alpha_reproduces_slow_losses() {
        let (theta, h, y) = instance(1, 6);
        let got = sequential_fast_forward(&theta, &StepSizes::uniform(FastMask::ALL, 0.0), &h, &y).unwrap();
        let (_, slow) = slow_forward(&theta, &h, &y).unwrap();
        for (a, b) in got.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn first_position_is_unchanged() {
        let (theta, h, y) = instance(2, 1);
        let got = sequential_fast_forward(&theta, &StepSizes::uniform(FastMask::ALL, 0.3), &h, &y).unwrap();
        let (_, slow) = slow_forward(&theta, &h, &y).unwrap();
        assert!((got[0] - slow[0]).abs() < 1e-12);
    }

    #[test]
    fn oracle_gradient_matches_finite_differences() {
        let (theta, h, y) = instance(3, 1);
        for tensor in HeadTensor::ALL {
            let an = position_gradient(&theta, h.row(0), y[0], tensor);
            let f = |x: &[f64]| {
                let mut p = theta.clone();
                p.tensor_mut(tensor).copy_from_slice(x);
                position_loss(&p, h.row(0), y[0])
            };
            let fd = finite_diff_grad(f, theta.tensor(tensor), 1e-5);
            for (a, b) in an.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-7, "{}: {a} vs {b}", tensor.name());
            }
        }
    }

    #[test]
    fn shape_errors() {
        let (theta, h, _) = instance(4, 3);
        let steps = StepSizes::new(FastMask::ALL);
        assert!(sequential_fast_forward(&theta, &steps, &h, &[0, 1]).is_err());
        assert!(sequential_fast_forward(&theta, &steps, &h, &[0, 1, 4]).is_err());
    }
}
