//! Named RNG streams derived from a single root seed.
//!
//! Every consumer of randomness (partitioning, participation, per-client
//! shuffling, APH sampling, ...) gets its own stream keyed by a label and a
//! list of integer coordinates, so switching one feature on or off never
//! shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derive a 64-bit seed for the stream `(root, label, coords)`.
pub fn derive(root: u64, label: &str, coords: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

pub fn stream(root: u64, label: &str, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(root, label, coords))
}

pub fn rng(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-epoch shuffling source for one training participant.
///
/// Epoch `e` draws its permutation from `derive(seed, "epoch", [first_epoch + e])`.
/// A client that trains `E` epochs per round and has already trained `k`
/// rounds uses `first_epoch = k * E`, which makes single-client federation
/// identical to one long centralized run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleStream {
    pub seed: u64,
    pub first_epoch: u64,
}

impl ShuffleStream {
    pub fn new(seed: u64) -> Self {
        ShuffleStream { seed, first_epoch: 0 }
    }

    pub fn starting_at(seed: u64, first_epoch: u64) -> Self {
        ShuffleStream { seed, first_epoch }
    }

    pub fn epoch_rng(&self, epoch: usize) -> StreamRng {
        stream(self.seed, "epoch", &[self.first_epoch + epoch as u64])
    }
}
