//! Deterministic randomness.
//!
//! Every random draw in this crate flows through [`ChaCha8Rng`], a
//! counter-based stream cipher generator whose output is identical on every
//! platform and independent of word size. Independent streams are derived by
//! hashing a base seed together with a string tag (FNV-1a over the tag bytes,
//! finalized with SplitMix64), so each document, sample, or grid cell gets its
//! own stream and any parallel schedule produces the same bytes as a serial
//! one.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 finalizer; bijective on u64, used to decorrelate nearby seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a string tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(base ^ splitmix64(h))
}

/// Derive a child seed from a base seed and an index.
pub fn derive_seed_n(base: u64, n: u64) -> u64 {
    splitmix64(base ^ splitmix64(n.wrapping_add(0x51ed_270b)))
}

/// Construct the canonical RNG for a seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
