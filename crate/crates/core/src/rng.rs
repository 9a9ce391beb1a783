//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every stream is keyed by a master seed plus a path of labels (input id,
//! split index, purpose). Keys are hashed with 64-bit FNV-1a and mixed with
//! SplitMix64, so the stream for one input never depends on how many other
//! inputs were processed before it or on which thread processed it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used throughout the crate.
pub type CpqRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a string key.
pub fn derive_seed(parent: u64, key: &str) -> u64 {
    splitmix64(parent ^ fnv1a64(key.as_bytes()))
}

/// Derives a child seed from a parent seed and an integer key.
pub fn derive_seed_u64(parent: u64, key: u64) -> u64 {
    splitmix64(parent ^ splitmix64(key))
}

/// Builds the RNG for a derived seed.
pub fn rng_from_seed(seed: u64) -> CpqRng {
    CpqRng::seed_from_u64(seed)
}

/// RNG for one input under a master seed: `rng(master, id)`.
pub fn input_rng(master: u64, input_id: &str) -> CpqRng {
    rng_from_seed(derive_seed(master, input_id))
}
