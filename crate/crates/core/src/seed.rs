//! Counter-based seed derivation.
//!
//! Every stochastic quantity in the crate draws from a ChaCha stream whose
//! seed is a pure function of a base seed and a path of counters, e.g.
//! `(base, shard, row_block, iteration)`. Streams for distinct paths are
//! independent for practical purposes, and any run can be replayed exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and an ordered path of counters.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    let mut h = mix64(base.wrapping_add(GOLDEN));
    for (depth, &c) in path.iter().enumerate() {
        h = mix64(h ^ mix64(c.wrapping_add(GOLDEN.wrapping_mul(depth as u64 + 2))));
    }
    h
}

/// A ChaCha8 generator for the stream `(base, path...)`.
pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}
