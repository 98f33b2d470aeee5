//! Deterministic generators keyed by (seed, domain, key).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent stream per (seed, domain, key). Results never depend on the
/// order in which streams are requested.
pub fn keyed_rng(seed: u64, domain: &str, key: &[u8]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(key);
    ChaCha8Rng::from_seed(h.finalize().into())
}
