//! Shared inputs for the stage benchmarks.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded uniform noise in `[-amp, amp)`.
pub fn noise(seed: u64, n: usize, amp: f64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-amp..amp)).collect()
}

/// Seeded complex spectrum with components in `[-amp, amp)`.
pub fn spectrum(seed: u64, bins: usize, amp: f64) -> Vec<Complex64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..bins)
        .map(|_| Complex64::new(r.random_range(-amp..amp), r.random_range(-amp..amp)))
        .collect()
}
