//! Deterministic fan-out of one master seed into labelled rng streams.
//!
//! The seed of stream `label` is the first eight bytes (little endian) of
//! `SHA-256(master.to_le_bytes() || label)`. Streams with different labels
//! are independent and renaming one label leaves all others untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, label: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

/// Stream labels used across the crate.
pub mod labels {
    pub const THETA: &str = "env/theta";
    pub const REFERENCE: &str = "env/reference";
    pub const NOISE: &str = "env/noise";
    pub const INIT: &str = "agent/init";
    pub const DROPOUT: &str = "agent/dropout";
    pub const POLICY: &str = "agent/policy";
    pub const REPLAY: &str = "agent/replay";
    pub const TARGET: &str = "agent/target";
    pub const WARMUP: &str = "agent/warmup";
    pub const EVAL: &str = "eval";
}
