//! Deterministic seed splitting.
//!
//! Every random stream in the crate is driven by a [`ChaCha8Rng`] whose seed
//! is derived from a master seed, a stream tag and an index:
//!
//! ```text
//! derive(master, stream, index) = mix(mix(master ^ mix(stream)) ^ mix(index + 1))
//! ```
//!
//! where `mix` is the SplitMix64 finalizer. Derived seeds for distinct
//! `(stream, index)` pairs are independent for all practical purposes, and the
//! rule does not depend on thread scheduling, so parallel dataset generation
//! reproduces the serial result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are part of the on-disk reproducibility contract.
pub mod stream {
    pub const SCENARIO: u64 = 0x5C3E;
    pub const DESIRED_SYMBOLS: u64 = 0xD500;
    pub const INTERFERER_SYMBOLS: u64 = 0x1500;
    pub const NOISE: u64 = 0x7015;
    pub const CSI_ERROR: u64 = 0xC510;
    pub const TRAIN_SET: u64 = 0x7A11;
    pub const TEST_SET: u64 = 0x7E57;
    pub const SHUFFLE: u64 = 0x5F1E;
    pub const INIT: u64 = 0x1A17;
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    mix(mix(master ^ mix(stream)) ^ mix(index.wrapping_add(1)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    rng(derive(master, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn derived_seeds_do_not_collide() {
        let mut seen = HashSet::new();
        for s in [stream::TRAIN_SET, stream::TEST_SET] {
            for i in 0..5000 {
                assert!(seen.insert(derive(42, s, i)));
            }
        }
    }

    #[test]
    fn derivation_is_stable() {
        assert_eq!(derive(1, 2, 3), derive(1, 2, 3));
        assert_ne!(derive(1, 2, 3), derive(1, 3, 2));
    }
}
