#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sync_transformer::model::{ModelConfig, SyncTransformer};
use sync_transformer::tensor::Tensor;
use sync_transformer::train::Sample;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Small model used by the property tests.
pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_blocks: 2,
        n_dec_blocks: 1,
        d_in: 5,
        left_context: 3,
        chunk_len: 4,
        overlap: 1,
        vocab_size: 7,
        ffn_inner: 12,
        seed,
    }
}

pub fn small_model(seed: u64) -> SyncTransformer {
    SyncTransformer::new(small_config(seed)).unwrap()
}

pub fn random_sample(rng: &mut impl Rng, cfg: &ModelConfig, frames: usize, labels: usize) -> Sample {
    Sample {
        features: random_tensor(rng, vec![frames, cfg.d_in]),
        labels: (0..labels).map(|_| rng.random_range(2..cfg.vocab_size)).collect(),
    }
}
