//! Named random sub-streams derived from one master seed.
//!
//! Every consumer of randomness asks for a stream by name (`"data"`,
//! `"base-train"`, `"infer/<image>/<c>/<set>"`, ...). The stream seed is the
//! SHA-256 of the master seed and the name, so streams are independent of the
//! order in which they are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(master: u64, name: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.finalize().into()
}

/// First eight bytes of [`derive_seed`], for APIs that take a `u64` seed.
pub fn derive_seed_u64(master: u64, name: &str) -> u64 {
    let s = derive_seed(master, name);
    u64::from_le_bytes(s[..8].try_into().unwrap())
}

pub fn stream(master: u64, name: &str) -> Rng {
    ChaCha8Rng::from_seed(derive_seed(master, name))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
