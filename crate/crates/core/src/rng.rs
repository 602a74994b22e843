//! Named random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(root seed, stream name, index)`. Streams never share state, so freezing
//! one (say, prob-layer noise) leaves all others untouched, and a training
//! run can be resumed from nothing more than its step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn substream(root: u64, name: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(b"probtrans/substream/v1");
    h.update(root.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let seed: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(seed)
}
