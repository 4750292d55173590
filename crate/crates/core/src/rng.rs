//! Counter-based, splittable randomness.
//!
//! Every random decision in the crate draws from a stream identified by
//! `(master_seed, stream_id)`. ChaCha is a counter-mode cipher, so a stream
//! is fully determined by its key and stream number and is identical on
//! every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn derive_rng(master_seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_id);
    rng
}

/// Mixes a sequence of words into one 64-bit seed (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Well-known stream ids, kept apart so that adding draws to one consumer
/// never shifts another.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const SUBSET: u64 = 2;
    pub const SHUFFLE_BASE: u64 = 1 << 20;
    pub const INIT_BASE: u64 = 1 << 32;
    pub const SAMPLE_BASE: u64 = 1 << 40;
    pub const PROBE: u64 = 3;
}
