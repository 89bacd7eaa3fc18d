//! Seeded random streams.
//!
//! Every generator in the crate draws from a `ChaCha8Rng` keyed by a 64-bit
//! seed. Independent substreams are derived by hashing `(seed, tag, index)`
//! through splitmix64, so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream tags used across modules. Kept in one place so no two generators
/// share a stream by accident.
pub mod tags {
    pub const SCENE: u64 = 1;
    pub const MODALITY_NOISE: u64 = 2;
    pub const DEFORM: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const SHUFFLE_B: u64 = 5;
    pub const INIT: u64 = 6;
    pub const MINIBATCH: u64 = 7;
    pub const SUBSETS: u64 = 8;
    pub const GCCM_SAMPLES: u64 = 9;
    pub const SPLIT: u64 = 10;
    pub const RANSAC: u64 = 11;
    pub const TASK: u64 = 12;
    pub const FUSION: u64 = 13;
    pub const TEXTURE: u64 = 14;
    pub const GRADCHECK: u64 = 15;
}
