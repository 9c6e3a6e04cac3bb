//! Named, independently derivable seed streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from a
//! root seed, a stream name and an index, so any cell, encoder or query can be
//! replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Data,
    Bank,
    Besa,
    Attack,
    Service,
}

impl Stream {
    pub fn name(&self) -> &'static str {
        match self {
            Stream::Data => "data",
            Stream::Bank => "bank",
            Stream::Besa => "besa",
            Stream::Attack => "attack",
            Stream::Service => "service",
        }
    }
}

/// Hash of `(root, label, index)` folded to 64 bits.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("32-byte digest"))
}

pub fn rng_from(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, index))
}

/// The five named streams hanging off one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStreams {
    pub root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn seed(&self, stream: Stream, index: u64) -> u64 {
        derive_seed(self.root, stream.name(), index)
    }

    pub fn rng(&self, stream: Stream, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(stream, index))
    }
}
