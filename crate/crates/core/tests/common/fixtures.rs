//! Small models and synthetic datasets shared by integration tests.

use std::path::Path;

use fec::backbone::ModelConfig;
use fec::training::{Dataset, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A 16×16 model small enough to train in a few seconds.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_size: [16, 16],
        stem_stride: 1,
        stage_channels: [4, 6, 8, 8],
        encode_dims: [3, 3, 4, 4],
        num_classes: 2,
        ..ModelConfig::micro()
    }
}

/// Grayscale 16×16 images whose bright half (left or right) is the label.
pub fn halves_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 256);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        for _ in 0..16 {
            for x in 0..16 {
                let bright = (x >= 8) == (label == 1);
                images.push(if bright { 0.8 } else { 0.2 } + rng.gen_range(-0.1f32..0.1));
            }
        }
        labels.push(label);
    }
    Dataset::from_raw(images, labels, 1, 16, 16, 2, Split::Train, None, Path::new("synthetic")).unwrap()
}
