//! Seeded random substreams.
//!
//! Every random decision in the pipeline draws from a generator keyed by
//! `(seed, tag, index)`, so results do not depend on iteration order or on
//! how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Distinct tags never share a generator.
pub mod tag {
    pub const IDENTITY: u64 = 1;
    pub const CLOTHES: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const DEGRADE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const SUBSAMPLE: u64 = 8;
    pub const TAD_DEGRADE: u64 = 9;
    pub const KMEANS: u64 = 10;
}

pub fn substream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
