//! Derivation of independent, reproducible random streams from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream keyed by `seed` and a path of tags, e.g. `(task, purpose)`.
/// Distinct tag paths give unrelated streams.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn from_u64(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
