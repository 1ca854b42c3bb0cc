//! Seed derivation.
//!
//! Every random consumer gets its own stream derived from one root seed:
//!
//! ```text
//! derive(root, label, index) = splitmix64(splitmix64(root ^ fnv1a64(label)) ^ splitmix64(index))
//! ```
//!
//! Each derived seed initializes a ChaCha20 generator. Because streams depend
//! only on `(root, label, index)`, work items can run in any order (or in
//! parallel) and still draw the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Rng = ChaCha20Rng;

/// Stream labels used across the crate.
pub mod streams {
    pub const CORPUS: &str = "corpus";
    pub const INIT: &str = "init";
    pub const BATCH: &str = "batch";
    pub const SAMPLE: &str = "sample";
    pub const THEORY: &str = "theory";
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(label: &str) -> u64 {
    label.bytes().fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a64(label)) ^ splitmix64(index))
}

pub fn rng(root: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive(root, label, index))
}
