//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! pure function of the run seed and a path of integer tags (epoch, step,
//! domain, sample index, ...). Resuming a run therefore needs only the run
//! seed and the counters, never a serialized generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags keep unrelated consumers of the same seed apart.
pub mod tag {
    pub const INIT: u64 = 0x494e4954;
    pub const SHUFFLE_FRAMES: u64 = 0x53_4846;
    pub const SHUFFLE_EVENTS: u64 = 0x53_4845;
    pub const AUGMENT_FRAMES: u64 = 0x41_5546;
    pub const AUGMENT_EVENTS: u64 = 0x41_5545;
    pub const VIEW_ONE: u64 = 1;
    pub const VIEW_TWO: u64 = 2;
    pub const SPLIT: u64 = 0x53_504c;
    pub const TOY: u64 = 0x544f59;
    pub const FAKE_PAIRING: u64 = 0x4641_4b45;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a tag path into a base seed.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}

/// Stable 64-bit hash of a string (FNV-1a), used for id-based split assignment.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Maps a 64-bit value to [0, 1).
pub fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}
