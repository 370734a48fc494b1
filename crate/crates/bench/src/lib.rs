//! Seeded fixtures shared by the benchmarks.

use nalgebra::Matrix3xX;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use viewconsist_core::KeypointConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A centered configuration with standard normal coordinates.
pub fn config(rng: &mut ChaCha8Rng, keypoints: usize) -> KeypointConfig {
    let raw = Matrix3xX::from_fn(keypoints, |_, _| rng.sample::<f64, _>(StandardNormal));
    KeypointConfig::center(&raw).expect("finite coordinates")
}

pub fn configs(rng: &mut ChaCha8Rng, count: usize, keypoints: usize) -> Vec<KeypointConfig> {
    (0..count).map(|_| config(rng, keypoints)).collect()
}

pub fn input(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}
