//! Seeded randomness.
//!
//! Every random draw in the crate comes from [`Rng`], a ChaCha8 stream
//! cipher generator (`rand_chacha::ChaCha8Rng`) seeded from a `u64` through
//! `SeedableRng::seed_from_u64`. Independent streams (per epoch, per run,
//! per purpose) are derived from a base seed with SplitMix64, so a run is
//! fully determined by the integers in its configuration and reproduces
//! across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed of an independent sub-stream `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(base) ^ stream.wrapping_mul(0xD605_BBB5_8C8A_BB3D))
}

/// Named sub-streams so that unrelated consumers never share draws.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const ADAPTER: u64 = 5;
}
