use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::model::Vocabulary;
use crate::tensor::Tensor;

/// Toy recognition task: each target symbol is a fixed random vector held
/// for `frames_per_symbol` frames, plus Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Includes blank and unk, which are never drawn.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub frames_per_symbol: usize,
    pub noise_std: f64,
    pub d_in: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 16,
            min_len: 3,
            max_len: 8,
            frames_per_symbol: 8,
            noise_std: 0.3,
            d_in: 16,
            seed: 7,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        // Two stride-2 convolutions need four raw frames per encoded frame.
        if self.frames_per_symbol < 4 {
            return Err(Error::Config(format!(
                "frames_per_symbol {} is below the front-end downsampling factor 4",
                self.frames_per_symbol
            )));
        }
        if self.vocab_size < 3 || self.d_in == 0 {
            return Err(Error::Config("synthetic task needs vocab_size ≥ 3 and d_in ≥ 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("target length range {}..={}", self.min_len, self.max_len)));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be ≥ 0".into()));
        }
        Ok(())
    }
}

pub struct SyntheticTask {
    spec: SyntheticTaskSpec,
    embedding: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let embedding =
            (0..spec.vocab_size).map(|_| (0..spec.d_in).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        Ok(SyntheticTask { spec, embedding })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    pub fn embedding(&self, symbol: usize) -> &[f64] {
        &self.embedding[symbol]
    }

    /// `n` samples from the independent sample stream `stream`.
    pub fn generate(&self, n: usize, stream: u64) -> Vec<Sample> {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream + 1);
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
        let first = Vocabulary::UNK + 1;
        (0..n)
            .map(|_| {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let labels: Vec<usize> = (0..len).map(|_| rng.random_range(first..spec.vocab_size)).collect();
                let mut data = Vec::with_capacity(len * spec.frames_per_symbol * spec.d_in);
                for &y in &labels {
                    for _ in 0..spec.frames_per_symbol {
                        data.extend(self.embedding[y].iter().map(|&e| e + noise.sample(&mut rng)));
                    }
                }
                let features =
                    Tensor::new(vec![len * spec.frames_per_symbol, spec.d_in], data).expect("frame count matches data");
                Sample { features, labels }
            })
            .collect()
    }
}

/// `n` samples from the default stream of `spec`.
pub fn gen_synthetic(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<Sample>> {
    gen_synthetic_stream(spec, n, 0)
}

pub fn gen_synthetic_stream(spec: &SyntheticTaskSpec, n: usize, stream: u64) -> Result<Vec<Sample>> {
    Ok(SyntheticTask::new(spec.clone())?.generate(n, stream))
}
