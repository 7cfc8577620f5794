//! Deterministic seed derivation.
//!
//! All randomness in the crate flows through explicit `u64` seeds. Derived
//! seeds are produced by mixing a base seed with context words (step index,
//! task index, a purpose tag, ...) through splitmix64, so independent
//! consumers never share a stream by accident.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod stream {
    pub const MODEL_INIT: u64 = 0x01;
    pub const PERM_SET: u64 = 0x02;
    pub const TASK_SAMPLE: u64 = 0x03;
    pub const TASK_SPLIT: u64 = 0x04;
    pub const SOURCE_BATCH: u64 = 0x05;
    pub const INNER_LOOP: u64 = 0x06;
    pub const PRETEXT: u64 = 0x07;
    pub const WORLD: u64 = 0x08;
    pub const EVAL_SUPPORT: u64 = 0x09;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with any number of context words.
pub fn mix(base: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(base ^ 0x243f_6a88_85a3_08d3);
    for &p in parts {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

/// Stable 64-bit hash of a string (FNV-1a), for mixing identifiers into seeds.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The crate-wide RNG. ChaCha8 is fast and its stream is stable across
/// releases, which the bitwise-determinism contract relies on.
pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
