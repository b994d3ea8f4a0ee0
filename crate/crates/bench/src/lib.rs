//! Fixtures shared by the benchmarks.

use defectscan_core::data::{synth_sample, SynthOptions};
use defectscan_core::{Image, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Synthetic wall photographs at the model's input size.
pub fn photos(n: usize, size: usize) -> Vec<Image> {
    let opts = SynthOptions {
        size,
        ..SynthOptions::default()
    };
    (0..n).map(|i| synth_sample((i % 2) as u8, 1, i, &opts).image).collect()
}

/// Scores with roughly a quarter of the values tied.
pub fn scores_and_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.86))).collect();
    let scores = labels
        .iter()
        .map(|&l| {
            let s: f64 = rng.random_range(0.0..1.0) * 0.7 + 0.3 * l as f64;
            if rng.random_bool(0.25) {
                (s * 20.0).round() / 20.0
            } else {
                s
            }
        })
        .collect();
    (scores, labels)
}
