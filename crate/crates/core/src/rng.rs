//! Keyed, counter-based random streams.
//!
//! Every random decision in a plan is addressed by a tuple such as
//! `(seed, epoch, frame position)`. The tuple selects a ChaCha8 stream, so a
//! draw never depends on how many other draws happened before it. Plans can
//! be generated in any order (or in parallel) and stay bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Stream tags keep independent decisions for the same frame apart.
pub mod tag {
    pub const SUBSTITUTE_FLAG: u64 = 0x5355_4253;
    pub const NEIGHBOR_PICK: u64 = 0x5049_434b;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const SUBSAMPLE: u64 = 0x5355_4253_4d50;
    pub const MIX_SELECT: u64 = 0x4d49_5853;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a key tuple into a single 64-bit stream id.
pub fn mix_key(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A generator positioned at the start of the stream addressed by `key`.
pub fn keyed(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix_key(key));
    rng
}

/// Uniform draw in `[0, 1)` at the given address.
pub fn uniform_at(seed: u64, key: &[u64]) -> f64 {
    keyed(seed, key).random::<f64>()
}

/// Uniform index in `0..n` at the given address.
pub fn index_at(seed: u64, key: &[u64], n: usize) -> usize {
    assert!(n > 0, "index_at needs a non-empty range");
    keyed(seed, key).random_range(0..n)
}

/// Fills `out` with i.i.d. standard normals from the addressed stream.
pub fn normals_at(seed: u64, key: &[u64], out: &mut [f64]) {
    let mut rng = keyed(seed, key);
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}
