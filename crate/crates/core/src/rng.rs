//! Labeled seed derivation.
//!
//! Every random stream in a run is a ChaCha8 generator keyed by a hash of
//! (master seed, label, counters). Streams never share state, so chain
//! sampling gives identical results regardless of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(master: u64, label: &str, counters: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for c in counters {
        hasher.update(c.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(master: u64, label: &str, counters: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, counters))
}
