//! Fixtures shared by the benchmarks.

use chr_core::eval::Ranked;
use chr_core::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform [-1, 1) NCHW tensor.
pub fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..n * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(n, c, h, w, data).expect("shape matches data")
}

/// `n` scored samples, roughly one in `ratio + 1` positive.
pub fn ranked_set(n: usize, ratio: usize, seed: u64) -> Vec<Ranked> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| Ranked {
            sample_id: format!("s{i:06}"),
            score: r.random(),
            positive: r.random_range(0..=ratio) == 0,
        })
        .collect()
}
