//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed by a master seed plus a purpose label, never from a global
//! source.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Mixes a base seed with a label and extra integers into a new seed.
pub fn derive(seed: u64, label: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn rng(seed: u64, label: &str, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, label, parts))
}

/// FNV-1a, stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
