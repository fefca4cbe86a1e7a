//! Named, seedable random streams.
//!
//! Every sampler in the crate takes an explicit stream. A stream is a
//! ChaCha8 generator keyed by the run seed with its stream id derived from a
//! name, so independent consumers never share state and adding a consumer
//! does not perturb the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// 64-bit FNV-1a over the name bytes.
pub fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream `name` under `seed`.
pub fn stream(seed: u64, name: &str) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

/// Stream keyed by a name and an index, for per-item generators
/// (per-class, per-sample, per-trial).
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream_id(name).wrapping_add(index));
    rng
}

/// Derive a child seed; used when a whole sub-run needs its own seed space.
pub fn child_seed(seed: u64, name: &str) -> u64 {
    let mut x = seed ^ stream_id(name);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
