//! Sub-seed derivation. Every random stream in the crate is keyed by the
//! single run seed plus a purpose string:
//!
//! `sub_seed = first 8 bytes (little-endian) of SHA-256(seed_le_bytes || purpose)`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(seed: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purposes_separate_streams() {
        assert_eq!(derive_seed(7, "corpus"), derive_seed(7, "corpus"));
        assert_ne!(derive_seed(7, "corpus"), derive_seed(7, "split"));
        assert_ne!(derive_seed(7, "corpus"), derive_seed(8, "corpus"));
    }
}
