#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sage_core::adversaries::DiscConfig;
use sage_core::model::ModelConfig;
use sage_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Narrow networks that still exercise every module.
pub fn tiny_model() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.projector.d_z = 8;
    c.projector.d_s = 8;
    c.projector.mapping_hidden = 8;
    c.projector.film_layers = 2;
    c.projector.film_hidden = 8;
    c.projector.feature_channels = 4;
    c.projector.n_samples = 4;
    c.decoder.channels = vec![4, 4, 4];
    c.translator.channels = vec![4, 4, 4, 4, 4];
    c.translator.spade_hidden = 4;
    c.disc = DiscConfig {
        base_channels: 2,
        max_channels: 4,
        max_resolution: 16,
    };
    c
}

pub fn random_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n).map(|_| Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut r)).collect()
}
