//! Seed derivation.
//!
//! Every stochastic step (episode sampling, augmentation, degradation,
//! initialization) draws from a generator seeded by mixing a base seed with a
//! tag path, so a step's randomness never depends on what ran before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and an ordered list of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stable tags for the different randomness streams.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN_EPISODE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const DROPBLOCK: u64 = 4;
    pub const VAL_EPISODE: u64 = 5;
    pub const EVAL_EPISODE: u64 = 6;
    pub const DEGRADE: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
    pub const EXPORT: u64 = 9;
}
