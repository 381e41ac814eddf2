//! Seeded random number helpers.
//!
//! Every random draw in the engine flows through a ChaCha20 generator seeded
//! from the run's master seed, so a fixed seed reproduces a run bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::matrix::DenseMatrix;

/// Deterministic generator for a master seed.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Matrix of iid standard normal draws, row-major order.
pub fn standard_normal_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// Glorot-uniform initialization: uniform on `[-s, s]` with
/// `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> DenseMatrix {
    let scale = libm::sqrt(6.0 / (rows + cols) as f64);
    let mut m = DenseMatrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = (rng.random::<f64>() * 2.0 - 1.0) * scale;
    }
    m
}
