//! Seed splitting.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from
//! `derive_seed(root, &[tag, ...])`: the root seed and each tag are folded in
//! order through the SplitMix64 finalizer. Streams therefore depend only on
//! the user seed and the logical position of the draw (replication, phase,
//! iteration, person, outer block), never on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the distinct consumers of randomness.
pub mod tag {
    pub const DATA: u64 = 0x11;
    pub const IW_SAMPLES: u64 = 0x22;
    pub const LR_HOLDOUT: u64 = 0x33;
    pub const LR_SEARCH: u64 = 0x44;
    pub const ELBO_EVAL: u64 = 0x55;
    pub const FIT: u64 = 0x66;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(root), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tags))
}
