//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed by a tuple of integers, so results do not depend on call
//! order across components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Folds `parts` into one 64-bit seed with splitmix64 rounds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}
