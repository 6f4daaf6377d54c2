//! Seed derivation. Every random stream in a run is derived from the single
//! run seed plus a stable tag, so adding a new stream never perturbs others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub type StepRng = ChaCha8Rng;

pub fn derive_rng(seed: u64, tag: &str) -> StepRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Normal samples rounded through f32 so that freshly initialized weights
/// survive a checkpoint round trip unchanged.
pub fn normal_vec(rng: &mut StepRng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    (0..n).map(|_| dist.sample(rng) as f32 as f64).collect()
}
