//! Deterministic derivation of independent random streams from one master seed.
//!
//! Every source of randomness in the crate derives its generator as
//! `stream(master_seed, component_label, index)`. The label names the
//! consumer ("init", "batches.primary", "eval.trial", ...) and the index
//! separates repeated uses (epoch number, trial number). Streams with
//! distinct (label, index) pairs are independent; the same triple always
//! yields the same generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG from (master seed, component label, index).
pub fn stream(master_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(label.as_bytes());
    hasher.update([0x1f]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
