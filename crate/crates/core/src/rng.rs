//! Seed derivation. Every stochastic component owns a ChaCha stream whose seed
//! is a deterministic mix of the run seed and a path of integer tags, so that
//! parallel work is reproducible regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags used across the crate.
pub mod tag {
    pub const META: u64 = 1;
    pub const ORACLE: u64 = 2;
    pub const EXTRACT: u64 = 3;
    pub const SUBSETS: u64 = 4;
    pub const PROJECTION: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const INIT: u64 = 7;
    pub const TAYLOR: u64 = 8;
    pub const HESSIAN: u64 = 9;
    pub const ROUNDING: u64 = 10;
    pub const SHUFFLE: u64 = 11;
}
