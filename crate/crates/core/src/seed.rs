//! Deterministic seeding.
//!
//! Every random draw in the library is made from a [`ChaCha8Rng`] built from a
//! 64-bit seed. Child seeds are derived from a master seed plus a purpose label
//! and an index, so independent stages (source draws, coupling slices, pair
//! sampling, ...) never share a stream and parallel assembly stays reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, label, index)`.
pub fn derive(master: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label keeps the derivation stable across toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix(mix(master ^ h).wrapping_add(index))
}

pub fn child_rng(master: u64, label: &str, index: u64) -> Rng {
    rng(derive(master, label, index))
}
