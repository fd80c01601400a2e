//! Inputs shared by the benchmarks.

use cromo_core::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Standard-normal matrix from a fixed seed.
pub fn randn(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_fn((rows, cols), |_| r.sample(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_reproducible() {
        assert_eq!(randn(3, 2, 1), randn(3, 2, 1));
        assert_ne!(randn(3, 2, 1), randn(3, 2, 2));
    }
}
