//! Deterministic seed derivation.
//!
//! Every randomized decision in the pipeline (examiner draws, distractor
//! slots, position permutations, mock payloads) derives its substream from
//! (master seed, stable artifact key), never from call order. Resuming a run
//! or changing the parallelism therefore never perturbs any random outcome.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 32 bytes of key material for (master, key). Stable across platforms and
/// releases, unlike `std`'s hasher.
pub fn derive_bytes(master: u64, key: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(key.as_bytes());
    hasher.finalize().into()
}

pub fn derive_u64(master: u64, key: &str) -> u64 {
    let bytes = derive_bytes(master, key);
    u64::from_le_bytes(bytes[..8].try_into().expect("sha256 yields 32 bytes"))
}

pub fn derive_rng(master: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_bytes(master, key))
}
