//! Hierarchical seed derivation. Every stage draws its randomness from a
//! seed derived from the root seed and a path of labels, so adding or
//! reordering stages never perturbs the others.

use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, path: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for part in path {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
