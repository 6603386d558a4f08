//! Deterministic seed derivation.
//!
//! Every random draw in the system comes from a generator seeded by mixing the
//! run seed with a small tuple of stream identifiers (step, sample id, ...).
//! No generator state has to be carried between steps, so resuming from a
//! checkpoint replays exactly the same randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Stream tags keep independent consumers of the same (seed, step) apart.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const EPOCH_ORDER: u64 = 2;
    pub const NEGATIVE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const MLM: u64 = 5;
    pub const PATCH_MASK: u64 = 6;
    pub const VALIDATION: u64 = 7;
    pub const SCENE: u64 = 8;
}
