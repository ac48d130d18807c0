//! Deterministic seed derivation.
//!
//! Every stochastic component takes an explicit `u64` seed and derives
//! substream seeds by hashing `(base, label, index)`. The hash is a fixed
//! FNV-1a/splitmix combination so derived streams are stable across
//! platforms and releases, unlike `std`'s `DefaultHasher`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a substream seed from a base seed, a textual label and an index.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &base.to_le_bytes());
    h = fnv1a(h, label.as_bytes());
    h = fnv1a(h, &index.to_le_bytes());
    splitmix(h)
}

/// Seeded RNG for a derived substream.
pub fn stream_rng(base: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label, index))
}

/// Seeded RNG directly from a raw seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
