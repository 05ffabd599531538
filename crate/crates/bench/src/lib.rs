//! Shared fixtures for the benchmarks.

use promptseg_core::synth::{generate, SynthParams};
use promptseg_core::{to_grayscale, GrayImage, LabeledExample, RasterImage};

/// `n` seeded train examples and one noisy test image at `side`.
pub fn fixture(side: usize, n: usize) -> (Vec<LabeledExample>, RasterImage) {
    let (train, test) = generate(&SynthParams { n_train: n, n_test: 1, side, ..Default::default() });
    let exemplars = train
        .into_iter()
        .map(|e| LabeledExample::new(e.id, e.image, e.mask).expect("generated pairs match"))
        .collect();
    (exemplars, test.into_iter().next().expect("one test image").image)
}

pub fn gray_pair(side: usize) -> (GrayImage, GrayImage) {
    let (train, test) = fixture(side, 1);
    (to_grayscale(&train[0].image), to_grayscale(&test))
}
