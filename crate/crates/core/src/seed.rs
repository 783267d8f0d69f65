//! Counter-based seed derivation. Every random draw in the crate comes from a
//! ChaCha stream whose seed is a pure function of the root seed and a fixed
//! path of counters, so work can be split across threads without changing
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `root` with a path of counters into a child seed.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn rng(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, path))
}

/// Stream identifiers, kept in one place so that no two consumers collide.
pub(crate) mod stream {
    pub const CLASS_LATENTS: u64 = 1;
    pub const SOURCE_RENDERER: u64 = 2;
    pub const TARGET_RENDERER: u64 = 3;
    pub const SAMPLES: u64 = 4;
    pub const RESAMPLE: u64 = 10;
    pub const BATCHES: u64 = 11;
    pub const INIT_SOURCE: u64 = 20;
    pub const INIT_TARGET: u64 = 21;
    pub const INIT_HEAD: u64 = 22;
    pub const HOLDOUT: u64 = 30;
    pub const HEAD_BATCHES: u64 = 31;
}
