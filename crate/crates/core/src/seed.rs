//! Labeled seed derivation: every random stream in the crate is keyed by the
//! master seed plus a label, so stages can be re-run independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, label, index))
}

/// Seed keyed by a string (e.g. a subject id) rather than an index.
pub fn derive_str(master: u64, label: &str, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(key.as_bytes());
    let digest = h.finalize();
    derive(master, label, u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes")))
}
