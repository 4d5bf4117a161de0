//! Seed derivation for independent, reproducible random streams.
//!
//! Every random decision in the library draws from a `ChaCha8Rng` whose seed
//! is derived from the run seed plus a purpose tag (and loop indices where
//! needed). Streams never share state, so reordering or parallelizing
//! consumers cannot change what any one stream produces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tags for [`stream`]. Each distinct tag yields an unrelated stream.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MIXUP: u64 = 3;
    pub const FEATURES: u64 = 4;
    pub const TEACHER: u64 = 5;
    pub const SUBSET: u64 = 6;
    pub const FLIP: u64 = 7;
    pub const NOISE: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into a single derived seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &p in parts {
        s = splitmix64(s ^ p);
    }
    s
}

/// A deterministic RNG for the given `(base, parts)` purpose.
pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Draws `k` distinct indices from `0..n` by partial Fisher-Yates, returned
/// in ascending order. Panics if `k > n`.
pub fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} of {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.random_range(0..(n - i));
        pool.swap(i, j);
    }
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle(rng: &mut ChaCha8Rng, items: &mut [usize]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
