//! Deterministic randomness.
//!
//! Every random draw in the crate goes through [`SimRng`], which is ChaCha8
//! seeded from a `u64` via `rand_chacha`'s `seed_from_u64`. ChaCha output is
//! platform independent, so identical seeds give bit-identical results on
//! every target. Sub-streams are derived with [`derive_seed`] so that adding
//! draws in one component never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer. Used as the fixed row hash for `random_hash`
/// distribution and for deriving sub-stream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for an independent stream labelled `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream))
}
