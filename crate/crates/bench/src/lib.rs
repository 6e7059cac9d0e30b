//! Shared fixtures for the dilution benchmarks.

use freqdrop_core::dilution::{sample_frequency_mask, sample_signal_mask, BinaryMask};
use freqdrop_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Map sides timed by the complexity benchmarks.
pub const SIDES: [usize; 5] = [64, 128, 256, 512, 1024];

pub const RATE: f64 = 0.1;

/// Single-channel `side × side` map with entries uniform in `[-1, 1)`.
pub fn random_map(side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(&[1, side, side], data).expect("square shape")
}

/// Map plus an element-wise mask at `rate`.
pub fn signal_fixture(side: usize, rate: f64, seed: u64) -> (Tensor, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mask = sample_signal_mask(&[1, side, side], rate, &mut rng).expect("valid rate");
    (random_map(side, seed), mask)
}

/// Map plus a Hermitian-paired frequency mask at `rate`.
pub fn frequency_fixture(side: usize, rate: f64, seed: u64) -> (Tensor, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mask = sample_frequency_mask(side, side, rate, true, &mut rng).expect("valid rate");
    (random_map(side, seed), mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_match_their_side() {
        let (map, mask) = signal_fixture(8, RATE, 1);
        assert_eq!(map.shape(), mask.shape());
        let (map, mask) = frequency_fixture(8, RATE, 1);
        assert_eq!(map.len(), mask.keep().len());
        assert!(mask.is_hermitian());
    }
}
