//! Deterministic random-number streams.
//!
//! Every stochastic operation in the pipeline (weight init, augmentation,
//! dropout, subsampling, jitter, cohort synthesis) pulls from its own named
//! ChaCha stream derived from the run seed.  Nothing uses a global or
//! thread-local RNG, so fold runs can execute on any number of worker
//! threads and still reproduce bit-identically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the salt bytes; cheap, stable, and good enough to keep
/// distinct stream names from colliding.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finaliser: decorrelates structurally similar inputs
/// (seed, seed+1, …) into well-mixed stream seeds.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream name.
pub fn derive(seed: u64, salt: &str) -> u64 {
    splitmix(seed ^ fnv1a(salt.as_bytes()))
}

/// Derive a child seed further qualified by an index (epoch, patient, …).
pub fn derive_indexed(seed: u64, salt: &str, index: u64) -> u64 {
    splitmix(derive(seed, salt) ^ splitmix(index.wrapping_add(1)))
}

/// A fresh deterministic generator for the named stream.
pub fn stream(seed: u64, salt: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, salt))
}

/// A fresh deterministic generator for the named, indexed stream.
pub fn stream_indexed(seed: u64, salt: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_indexed(seed, salt, index))
}
