//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream whose seed is derived from a master seed and a stream label, so
//! no two subsystems share a stream and nothing depends on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes. Stable across platforms and compiler versions,
/// unlike `std::collections::hash_map::DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Child seed for `(stream, index)` under `seed`.
pub fn derive(seed: u64, stream: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(stream.as_bytes())) ^ splitmix64(index))
}

/// Seeded 64-bit hash of a token, used by the feature-hashing encoder.
pub fn hash_token(seed: u64, token: &str) -> u64 {
    splitmix64(fnv1a(token.as_bytes()) ^ splitmix64(seed))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
