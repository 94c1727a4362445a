//! Seeded random sources shared by fixtures, initialisers and samplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::Matrix;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a sub-component from a base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian_vec(rng: &mut SeededRng, len: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; len];
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::new(rows, cols, gaussian_vec(rng, rows * cols, std)).expect("gaussian samples are finite")
}
