use fwl::layer::{
    fast_forward, per_position_grads, slow_forward, update_stream_state, Decays, FastMask, HeadParams,
    StepSizes, Stream, StreamState,
};
use fwl::oracle::sequential_fast_forward;
use fwl::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, t: usize, d: usize, vocab: usize) -> (HeadParams, Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = HeadParams::init(d, 2 * d, vocab, seed);
    let h = Matrix::from_vec(t, d, (0..t * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let y = (0..t).map(|_| rng.random_range(0..vocab)).collect();
    (theta, h, y)
}

fn steps(seed: u64, mask: FastMask) -> StepSizes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1fa);
    let mut s = StepSizes::new(mask);
    for a in s.alpha.iter_mut() {
        *a = rng.random_range(-0.1..0.5);
    }
    s
}

#[test]
fn fast_forward_matches_sequential_reference() {
    let masks = [FastMask::BIAS_ONLY, FastMask::VECTORS, FastMask::MATRICES, FastMask::ALL];
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let t = [1, 2, 17, 64][(seed % 4) as usize];
        let d = [4, 16, 32][(seed % 3) as usize];
        let vocab = [3, 17][(seed / 4 % 2) as usize];
        let mask = masks[(seed / 2 % 4) as usize];
        let (theta, h, y) = instance(seed, t, d, vocab);
        let st = steps(seed, mask);
        let (tape, _) = slow_forward(&theta, &h, &y).unwrap();
        let grads = per_position_grads(&theta, &tape, &y).unwrap();
        let fast = fast_forward(&theta, &st, &tape, &grads, None, 7).unwrap();
        let oracle = sequential_fast_forward(&theta, &st, &h, &y).unwrap();
        for (a, b) in fast.losses.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-9, "max deviation {worst:e}");
}

#[test]
fn arbitrary_masks_match_reference() {
    for bits in [0b0000_0001u8, 0b0001_0100, 0b1100_0000, 0b0110_0011] {
        let mut mask = FastMask::NONE;
        for t in fwl::layer::HeadTensor::ALL {
            if bits & (1 << t.index()) != 0 {
                mask = mask.with(t);
            }
        }
        let (theta, h, y) = instance(bits as u64, 32, 16, 11);
        let st = steps(bits as u64, mask);
        let (tape, _) = slow_forward(&theta, &h, &y).unwrap();
        let grads = per_position_grads(&theta, &tape, &y).unwrap();
        let fast = fast_forward(&theta, &st, &tape, &grads, None, 64).unwrap();
        let oracle = sequential_fast_forward(&theta, &st, &h, &y).unwrap();
        for (a, b) in fast.losses.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

/// With γ = 1 and an identity backbone, two streamed segments reproduce one
/// fast pass over the concatenation.
#[test]
fn streamed_segments_equal_concatenated_pass() {
    let (theta, h, y) = instance(77, 24, 8, 7);
    let st = steps(77, FastMask::ALL);
    let full = {
        let (tape, _) = slow_forward(&theta, &h, &y).unwrap();
        let grads = per_position_grads(&theta, &tape, &y).unwrap();
        fast_forward(&theta, &st, &tape, &grads, None, 64).unwrap().losses
    };
    let decays = Decays::uniform(1.0);
    let mut state = StreamState::empty(&theta, st.mask);
    let mut streamed = Vec::new();
    for (lo, hi) in [(0, 10), (10, 17), (17, 24)] {
        let hs = h.slice_rows(lo, hi);
        let ys = &y[lo..hi];
        let (tape, _) = slow_forward(&theta, &hs, ys).unwrap();
        let grads = per_position_grads(&theta, &tape, ys).unwrap();
        let f = fast_forward(&theta, &st, &tape, &grads, Some(Stream { state: &state, decays: &decays }), 4)
            .unwrap();
        streamed.extend(f.losses);
        state = update_stream_state(&state, &grads, &tape, &decays);
    }
    for (a, b) in full.iter().zip(&streamed) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}
