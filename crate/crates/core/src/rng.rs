//! Keyed random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! derived from a master seed and a path of integers, e.g.
//! `(seed, replicate, CONTAMINATE, b)`. Streams never depend on the order in
//! which tasks run, so results are identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags used as the first path element below a seed.
pub mod tag {
    pub const COHORT: u64 = 0x636f_686f;
    pub const CONTAMINATE: u64 = 0x636f_6e74;
    pub const BOOTSTRAP: u64 = 0x626f_6f74;
    pub const BOOTSTRAP_FIT: u64 = 0x6266_6974;
    pub const MEASUREMENT: u64 = 0x6d65_6173;
    pub const PILOT: u64 = 0x7069_6c6f;
    pub const REPLICATE: u64 = 0x7265_706c;
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A 64-bit key folded from `seed` and `path`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let h = path
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc.rotate_left(23) ^ splitmix64(p)));
    splitmix64(h ^ path.len() as u64)
}

/// The stream for `(seed, path...)`.
pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    let mut key = [0u8; 32];
    let mut h = derive_seed(seed, path);
    for chunk in key.chunks_exact_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
