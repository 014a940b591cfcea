//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit seed derived from a parent seed and a stream tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for stream `tag` of `parent`. Order-independent: the child
/// depends only on the pair, never on how many other children were drawn.
pub fn derive(parent: u64, tag: u64) -> u64 {
    mix64(mix64(parent) ^ mix64(tag.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named stream tags, so that call sites never collide by accident.
pub mod stream {
    pub const PREDICTION_INIT: u64 = 1;
    pub const NOISE_TRUNK_INIT: u64 = 2;
    pub const NOISE_HEAD_INIT: u64 = 3;
    pub const GATE_TRUNK_INIT: u64 = 4;
    pub const GATE_HEAD_INIT: u64 = 5;
    pub const SHUFFLE: u64 = 10;
    pub const RANDOM_PI: u64 = 11;
    pub const MODEL: u64 = 12;
    pub const GRID_TRIAL: u64 = 20;
    pub const SPLIT: u64 = 30;
    pub const MONTE_CARLO: u64 = 40;
    pub const LINEAR_SETUP: u64 = 41;
    pub const MASK_CORRUPTION: u64 = 42;
    pub const RUN_GENERATOR: u64 = 60;
    pub const RUN_SPLIT: u64 = 61;
    pub const RUN_TRAINING: u64 = 62;
    pub const RUN_RISK: u64 = 63;
}
