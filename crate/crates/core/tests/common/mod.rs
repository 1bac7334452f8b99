#![allow(dead_code)]

pub mod gradcheck;
pub mod reference;

use hatnet::model::{EncoderKind, ModelConfig, PsiKind, TilingConfig};
use hatnet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn feature_config(n: usize, m: usize, d: usize, heads: usize, classes: usize, psi: PsiKind) -> ModelConfig {
    ModelConfig {
        tiling: TilingConfig { n, m, bag_px: 1, word_px: 1, d },
        heads,
        classes,
        psi,
        encoder: EncoderKind::Precomputed,
        ..ModelConfig::default()
    }
}

pub fn random_tensor(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(dims.to_vec(), &data).unwrap()
}
