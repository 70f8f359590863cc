//! Seeded fixtures shared by the kernel benchmarks.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> ArrayD<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

pub fn feature_map(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
    uniform(&[c, h, w], seed).into_dimensionality().expect("rank 3")
}

/// `n` rows of `d`-dimensional embeddings.
pub fn embeddings(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}
