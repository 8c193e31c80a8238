//! Seeded random streams with labeled derivation.
//!
//! Every random draw in the framework comes from a [`ChaCha8Rng`] stream
//! derived from a `(seed, label)` pair. The label is hashed into the stream
//! key, so adding a new consumer with a fresh label never perturbs the draws
//! seen by existing consumers of the same seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent random stream for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Collapses `(seed, label)` to a derived 64-bit seed, for components that
/// take a plain integer seed (e.g. per-cell attack seeds in a benchmark).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_deterministic() {
        let a: f64 = stream(7, "x").gen();
        let b: f64 = stream(7, "x").gen();
        assert_eq!(a, b);
    }

    #[test]
    fn labels_separate_streams() {
        let a: f64 = stream(7, "x").gen();
        let b: f64 = stream(7, "y").gen();
        assert_ne!(a, b);
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(0, "a"), derive_seed(0, "b"));
        assert_eq!(derive_seed(3, "a"), derive_seed(3, "a"));
    }
}
