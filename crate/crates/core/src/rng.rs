//! Seed management.
//!
//! Every stochastic component draws from a `ChaCha8Rng` whose seed is derived
//! from `(experiment seed, purpose tag, index)`, so independent streams never
//! overlap and any sub-run can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

/// Hash `(seed, tag, index)` into a 64-bit sub-seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, tag: &str, index: u64) -> SimRng {
    seeded(derive_seed(seed, tag, index))
}
