//! Seed derivation for reproducible random streams.
//!
//! Every stream is a pure function of a root seed and a path of integer
//! keys (epoch, batch, sample index, ...), so the values a sample sees do
//! not depend on which worker processes it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix(root), |acc, &k| mix(acc ^ mix(k)))
}

pub fn stream(root: u64, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, keys))
}

/// Domain tags keep independent uses of one root seed apart.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRANSFORM: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const DATA: u64 = 6;
    pub const SUBSAMPLE: u64 = 7;
    pub const EVAL: u64 = 8;
}
