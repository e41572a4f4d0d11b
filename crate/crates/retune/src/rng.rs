//! Splittable deterministic random streams.
//!
//! Every source of randomness in the crate is a ChaCha8 stream (a
//! counter-based generator) keyed by a SHA-256 digest of
//! `(global seed, purpose tag, indices)`. Streams are independent of
//! evaluation order: masking for step 7 of batch slot 3 draws the same
//! values no matter what else ran before.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic stream for `(seed, tag, indices)`.
pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0xfe]);
    hasher.update(tag.as_bytes());
    hasher.update([0xff]);
    for ix in indices {
        hasher.update(ix.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Fold a child seed out of a parent seed and a label, for nested scopes
/// (pipeline root seed -> per-stage seeds).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0xab]);
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
