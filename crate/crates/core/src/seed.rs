//! Named random sub-streams derived from one run seed.
//!
//! Every consumer of randomness (data generation, initialization, path
//! sampling, corpus split, probe training) draws from its own stream so that
//! changing one component never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const DATAGEN: &str = "datagen";
pub const INIT: &str = "init";
pub const SAMPLING: &str = "sampling";
pub const SPLIT: &str = "split";
pub const PROBE: &str = "probe";

/// Derives a 32-byte ChaCha seed from `(seed, stream, parts)`.
pub fn stream_seed(seed: u64, stream: &str, parts: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    h.finalize().into()
}

pub fn stream_rng(seed: u64, stream: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_seed(seed, stream, parts))
}

/// Stream keyed by a string label (scene ids).
pub fn keyed_rng(seed: u64, stream: &str, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
