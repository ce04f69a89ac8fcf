//! Deterministic seed derivation.
//!
//! Every consumer of randomness (data generation, noise, operator init,
//! landscape directions, batch shuffling) derives its own stream from one
//! root seed plus a textual label. Streams are therefore independent, and
//! paired experiments (continuation on/off) can share data randomness by
//! sharing the root seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 32-byte seed from (root, label) via SHA-256.
pub fn derive_seed(root: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// ChaCha8 generator for the stream named by `label` under `root`.
/// ChaCha8 is used everywhere because its output is identical across
/// platforms and Rust versions, unlike `StdRng` which is explicitly
/// allowed to change.
pub fn rng_for(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(root, label))
}
