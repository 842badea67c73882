//! Seeded randomness shared by every stochastic component.
//!
//! All simulation randomness flows through [`SimRng`], a ChaCha8 stream whose
//! output is fixed across platforms and crate versions, so a seed fully pins
//! a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes. Stable across builds, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// Seed for one experiment cell: the base seed mixed with a stable hash of
/// `(strategy, experts, replicate)`.
pub fn cell_seed(base: u64, strategy: &str, experts: usize, replicate: usize) -> u64 {
    let key = format!("{strategy}/{experts}/{replicate}");
    mix64(base ^ mix64(fnv1a(key.as_bytes())))
}

/// Derive an independent sub-stream seed from a parent seed and a label.
pub fn substream(seed: u64, label: &str) -> u64 {
    mix64(seed ^ fnv1a(label.as_bytes()))
}
