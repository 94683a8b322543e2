//! Seeded, splittable random streams.
//!
//! Every consumer asks for a stream keyed by `(seed, tags...)`. Streams are
//! ChaCha8 instances whose stream id is derived from the tags, so adding a new
//! consumer (say another task) never shifts the numbers an existing one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Tag values used to separate independent consumers of randomness.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const DATA_TRAIN: u64 = 2;
    pub const DATA_TEST: u64 = 3;
    pub const CENTROIDS: u64 = 4;
    pub const PERMUTATION: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const LABELS: u64 = 7;
    pub const MASK: u64 = 8;
    pub const BATCHES: u64 = 9;
}

/// Deterministic generator for `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}
