//! Deterministic seed derivation for independent Monte-Carlo streams.
//!
//! Every random stream in the crate is keyed by a master seed plus a short
//! path of integers (namespace, drop, UE, ...). Streams with different paths
//! are statistically independent and do not depend on evaluation order, so
//! parallel workers produce bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Namespaces keep training, cost-estimation and evaluation draws disjoint.
pub mod ns {
    pub const LAYOUT: u64 = 0x4c41_594f;
    pub const DATASET: u64 = 0x4441_5441;
    pub const BANK: u64 = 0x4241_4e4b;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const EVAL: u64 = 0x4556_414c;
    pub const SPLIT: u64 = 0x5350_4c54;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, path))
}
