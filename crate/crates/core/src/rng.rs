//! Deterministic RNG substreams.
//!
//! Every random quantity in the toolkit is drawn from a [`ChaCha8Rng`] seeded
//! from a root seed plus a path of integer labels (tag id, purpose, reader id,
//! ...). Two different paths give statistically independent streams, so work
//! can be reordered or parallelised without changing any drawn value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes, mixed into the substream path.
pub mod purpose {
    pub const PROFILE: u64 = 1;
    pub const PAYLOAD: u64 = 2;
    pub const IMPAIRMENT: u64 = 3;
    pub const CHANNEL: u64 = 4;
    pub const PLACEMENT: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const INIT: u64 = 8;
    pub const SHUFFLE: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from a root seed and a label path.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Returns the generator for `path` under `root`.
pub fn substream(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

/// Stable 64-bit label for a string (FNV-1a), used to mix scenario names
/// into substream paths.
pub fn label_of(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
