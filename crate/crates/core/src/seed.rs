//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit seed mixed with a purpose tag, so streams stay
//! independent and reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed from `seed` and a textual tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(mix(seed), |acc, b| mix(acc ^ u64::from(b)))
}

pub fn derive_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    mix(derive(seed, tag) ^ mix(index))
}

pub fn rng(seed: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, tag))
}

pub fn rng_indexed(seed: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(seed, tag, index))
}
