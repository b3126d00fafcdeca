//! Fixed inputs shared by the benchmarks.

use ovit_core::data::{synth_dataset, SynthSpec};
use ovit_core::{ModelParams, PatchGridSpec, Tensor, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-1.0..1.0))
}

/// The two-block, 64-wide encoder used for desk-scale runs.
pub fn toy_model(stride: usize) -> (ViTConfig, ModelParams) {
    let grid = PatchGridSpec::new(32, 8, stride).expect("valid toy grid");
    let cfg = ViTConfig::custom(2, 64, 4, 4.0, grid, 1).expect("valid toy model");
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    (cfg, params)
}

pub fn toy_images(count: usize) -> Vec<Tensor> {
    let spec = SynthSpec {
        num_ids: 2,
        imgs_per_id: count.div_ceil(2),
        image_size: 32,
        noise_std: 0.05,
        seed: 0,
    };
    let mut images = synth_dataset(&spec).expect("valid synth spec").images;
    images.truncate(count);
    images
}

/// Scores with a modest separation between the classes.
pub fn score_sets(genuine: usize, impostor: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = (0..genuine).map(|_| rng.random_range(-0.2..1.0)).collect();
    let i = (0..impostor).map(|_| rng.random_range(-1.0..0.4)).collect();
    (g, i)
}
