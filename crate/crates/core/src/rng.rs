//! Named random sub-streams derived from one experiment seed.
//!
//! Each component draws from its own stream so that, for example, changing
//! how many anchors the sampler consumes never perturbs weight init.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream for `name` under `seed`. Distinct names give independent streams.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
