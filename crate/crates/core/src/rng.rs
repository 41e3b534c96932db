//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from a `(seed, purpose, index)`
//! triple, so results never depend on how many draws another component made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer; used to fold stream coordinates into one seed.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ purpose) ^ index)
}

pub fn stream(seed: u64, purpose: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, index))
}

/// FNV-1a over bytes; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub mod purpose {
    pub const DATASET: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const TRUNCATE: u64 = 5;
    pub const GRADCHECK: u64 = 6;
}
