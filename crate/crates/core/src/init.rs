//! Seeded random streams and weight initializers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use squeeze_tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// An independent stream per `(seed, purpose)`, so that adding a consumer of
/// randomness for one purpose never shifts the draws of another.
pub fn rng_for(seed: u64, purpose: &str) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(purpose));
    rng
}

pub fn xavier_normal_std(rows: usize, cols: usize) -> f64 {
    (2.0 / (rows + cols) as f64).sqrt()
}

pub fn xavier_uniform_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

pub fn xavier_normal(rng: &mut SeededRng, rows: usize, cols: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, xavier_normal_std(rows, cols)).expect("finite std");
    (0..rows * cols).map(|_| normal.sample(rng)).collect()
}

pub fn xavier_uniform(rng: &mut SeededRng, rows: usize, cols: usize) -> Vec<f64> {
    let a = xavier_uniform_bound(rows, cols);
    (0..rows * cols).map(|_| rng.random_range(-a..a)).collect()
}

pub(crate) fn xavier_normal_param(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    Tensor::parameter(xavier_normal(rng, rows, cols), &[rows, cols]).expect("nonzero dims")
}

pub(crate) fn xavier_uniform_param(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    Tensor::parameter(xavier_uniform(rng, rows, cols), &[rows, cols]).expect("nonzero dims")
}
