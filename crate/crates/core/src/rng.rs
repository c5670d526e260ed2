//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer of randomness (fold assignment, a simulation replication,
//! one tree of a forest) gets its own ChaCha stream keyed by
//! `derive_seed(base, stream)`, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a base seed with a stream index into a new 64-bit seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix(mix(base) ^ mix(stream.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Named sub-streams used inside one replication.
pub(crate) mod streams {
    pub const FOLDS: u64 = 1;
    pub const DESIGN: u64 = 2;
    pub const ASSIGNMENT: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const FOREST: u64 = 5;
    pub const SIGNAL: u64 = 6;
    pub const ESTIMATOR: u64 = 7;
}
