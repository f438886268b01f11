//! Seeded random streams.
//!
//! Every random draw in the simulator comes from ChaCha20 keyed by a master
//! seed and a named domain, with the ChaCha stream id selecting the item
//! (channel index, training run, BER block...). Independent items therefore
//! never share a generator and can be produced in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Name recorded in result metadata.
pub const GENERATOR_NAME: &str = "ChaCha20 (rand_chacha), key = SHA-256(master seed, domain), stream = item index";

pub type SimRng = ChaCha20Rng;

/// Generator for item `index` of `domain` under `master`.
pub fn stream(master: u64, domain: &str, index: u64) -> SimRng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(domain.as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
