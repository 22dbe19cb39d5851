//! Seed derivation for per-index generators.
//!
//! Every generator draws from a `ChaCha8Rng` seeded with
//! `mix(base, stream, index)`, so items can be produced in any order (or in
//! parallel) and still come out identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer (constants from Steele, Lea & Flood 2014).
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a base seed, a stream tag and an item index into one seed.
pub fn mix(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(stream)) ^ index)
}

pub fn rng(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(base, stream, index))
}

/// Stream tags used across the crate.
pub mod stream {
    pub const MODELS: u64 = 1;
    pub const BACKGROUND: u64 = 2;
    pub const PAIRS: u64 = 3;
    pub const SCENES: u64 = 4;
    pub const PATCHES: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const QUERIES: u64 = 8;
    pub const SUBSAMPLE: u64 = 9;
}
