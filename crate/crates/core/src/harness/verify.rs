//! Quick self-checks of the numerical core against its references.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::layer::{fast_forward, per_position_grads, slow_forward, FastMask, HeadParams, StepSizes};
use crate::linear_attention::{causal_linear_attention, chunked_causal_linear_attention, KVState};
use crate::numerics::Matrix;
use crate::oracle::sequential_fast_forward;
use crate::training::{grad_check, Mode, Model, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub worst: f64,
    pub tolerance: f64,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn check(name: &str, worst: f64, tolerance: f64) -> Check {
    Check {
        name: name.to_string(),
        pass: worst.is_finite() && worst < tolerance,
        worst,
        tolerance,
    }
}

fn oracle_equivalence(seed: u64) -> Check {
    let masks = [FastMask::BIAS_ONLY, FastMask::VECTORS, FastMask::MATRICES, FastMask::ALL];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..50usize {
        let t = [1, 2, 17, 64][i % 4];
        let d = [4, 16, 32][i % 3];
        let vocab = [3, 17][i / 4 % 2];
        let theta = HeadParams::init(d, 2 * d, vocab, rng.random());
        let h = random_matrix(&mut rng, t, d);
        let y: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
        let mut steps = StepSizes::new(masks[i / 2 % 4]);
        for a in steps.alpha.iter_mut() {
            *a = rng.random_range(-0.1..0.5);
        }
        let result = (|| {
            let (tape, _) = slow_forward(&theta, &h, &y)?;
            let grads = per_position_grads(&theta, &tape, &y)?;
            let fast = fast_forward(&theta, &steps, &tape, &grads, None, 7)?;
            let reference = sequential_fast_forward(&theta, &steps, &h, &y)?;
            Ok::<_, crate::FwlError>(fast.losses.iter().zip(&reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
        })();
        worst = worst.max(result.unwrap_or(f64::INFINITY));
    }
    check("fast pass vs sequential reference (50 instances)", worst, 1e-9)
}

fn chunked_attention(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for &t in &[1usize, 7, 63, 256] {
        let q = random_matrix(&mut rng, t, 5);
        let k = random_matrix(&mut rng, t, 5);
        let v = random_matrix(&mut rng, t, 4);
        let init = KVState {
            accumulator: random_matrix(&mut rng, 5, 4),
        };
        for init in [None, Some(&init)] {
            let (reference, _) = causal_linear_attention(&q, &k, &v, init).unwrap();
            for chunk in [1, 7, 64, t] {
                let (out, _) = chunked_causal_linear_attention(&q, &k, &v, chunk, init).unwrap();
                worst = worst.max(out.max_abs_diff(&reference));
            }
        }
    }
    check("chunked vs quadratic linear attention", worst, 1e-10)
}

fn second_order(seed: u64) -> Check {
    let cfg = BackboneConfig {
        vocab_size: 5,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        memory_len: 4,
        seed,
    };
    let mut model = Model::new(&cfg, 12, FastMask::ALL).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in model.steps.alpha.iter_mut() {
        *a = rng.random_range(0.1..0.4);
    }
    let mut worst = 0.0f64;
    for segments in [1, 2] {
        let train = TrainConfig {
            mode: Mode::Full,
            seq_len: 8,
            segments,
            ..Default::default()
        };
        let batch: Vec<Vec<usize>> = (0..2)
            .map(|_| (0..train.window()).map(|_| rng.random_range(0..5)).collect())
            .collect();
        worst = worst.max(grad_check(&model, &batch, &train, 4, seed).unwrap_or(f64::INFINITY));
    }
    check("second-order gradients vs finite differences", worst, 1e-4)
}

fn zero_step_identity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = HeadParams::init(6, 10, 9, seed);
    let h = random_matrix(&mut rng, 20, 6);
    let y: Vec<usize> = (0..20).map(|_| rng.random_range(0..9)).collect();
    let (tape, slow) = slow_forward(&theta, &h, &y).unwrap();
    let grads = per_position_grads(&theta, &tape, &y).unwrap();
    let fast = fast_forward(&theta, &StepSizes::uniform(FastMask::ALL, 0.0), &tape, &grads, None, 7).unwrap();
    let worst = fast.losses.iter().zip(&slow).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    check("zero step sizes reduce to the slow head", worst, 1e-15)
}

/// Runs every check; `seed` picks the random instances.
pub fn verify(seed: u64) -> Vec<Check> {
    vec![
        oracle_equivalence(seed),
        chunked_attention(seed),
        second_order(seed),
        zero_step_identity(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in verify(3) {
            assert!(c.pass, "{c:?}");
        }
    }
}
