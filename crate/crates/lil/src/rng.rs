//! Deterministic randomness. Every random draw in the pipeline comes from a
//! named substream of one global seed, so stages can be re-run independently
//! without replaying the draws of earlier stages.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Returns the RNG for `label` under `seed`. The stream depends on both, and
/// distinct labels give statistically independent streams.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// A u64 seed derived from a substream, for recording in manifests so a single
/// scene (or similar unit) can be regenerated without the global seed.
pub fn substream_seed(seed: u64, label: &str) -> u64 {
    let mut rng = substream(seed, label);
    rng.gen::<u64>()
}

/// RNG seeded directly from a recorded u64 (the counterpart of
/// [`substream_seed`]).
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws an n-vector of standard normal samples.
pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Array1<f32> {
    Array1::from_iter((0..n).map(|_| rng.sample::<f32, _>(StandardNormal)))
}

/// A pool of scene latents from one substream. Search and evaluation use
/// distinct labels so their scene sets never overlap by construction.
pub fn latent_pool(seed: u64, label: &str, n: usize, dz: usize) -> Vec<Array1<f32>> {
    let mut rng = substream(seed, label);
    (0..n).map(|_| standard_normal(&mut rng, dz)).collect()
}
