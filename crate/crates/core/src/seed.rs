//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a root seed mixed with a fixed path of integers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, path))
}

/// Stream tags so that independent consumers of one root seed never share a
/// generator.
pub(crate) mod stream {
    pub const SPLIT: u64 = 1;
    pub const HISTORY: u64 = 2;
    pub const EXAMPLES: u64 = 3;
    pub const INIT: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const STRUCTURAL_INIT: u64 = 6;
    pub const SYNTHETIC: u64 = 7;
}
