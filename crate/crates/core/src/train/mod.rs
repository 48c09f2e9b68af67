//! Synthetic data, optimisation and persistence.

mod checkpoint;
mod config;
mod data;
mod synthetic;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::RunConfig;
pub use data::{load_dataset, read_features, read_manifest, write_features, ManifestEntry};
pub use synthetic::{gen_synthetic, gen_synthetic_stream, SyntheticTask, SyntheticTaskSpec};

use crate::decoding::{beam_decode_features, edit_distance, greedy_decode_features, BeamConfig};
use crate::error::{Error, Result};
use crate::model::SyncTransformer;
use crate::tensor::{Graph, Tensor};

/// Raw features `[T, d_in]` and target ids (no blanks).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// `scale·d^(−1/2)·min(step^(−1/2), step·warmup^(−3/2))`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("learning-rate step counts from 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Contract("warmup must be at least one step".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    /// Peak scale factor of the learning-rate schedule.
    pub lr_scale: f64,
    /// Global gradient-norm threshold.
    pub clip_norm: f64,
    pub eval_interval: u64,
    /// Stop once held-out greedy CER reaches this value.
    pub target_cer: Option<f64>,
    pub checkpoint: Option<std::path::PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            total_steps: 20_000,
            warmup_steps: 1000,
            lr_scale: 1.0,
            clip_norm: 5.0,
            eval_interval: 250,
            target_cer: None,
            checkpoint: None,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.warmup_steps == 0 {
            return Err(Error::Config("batch_size and warmup_steps must be ≥ 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 || !self.lr_scale.is_finite() {
            return Err(Error::Config("clip_norm must be ≥ 0 and lr_scale finite".into()));
        }
        Ok(())
    }
}

/// Adam moments for every parameter tensor plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9, state: AdamState { step: 0, m, v } }
    }

    pub fn with_state(state: AdamState) -> Self {
        Adam { state, ..Adam::new([]) }
    }

    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let st = &mut self.state;
        if params.len() != grads.len() || params.len() != st.m.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        st.step += 1;
        let c1 = 1.0 - self.beta1.powi(st.step as i32);
        let c2 = 1.0 - self.beta2.powi(st.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
            if p.numel() != g.len() || g.len() != m.len() {
                return Err(Error::Shape("gradient does not match its parameter".into()));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Mean lattice loss over `batch` and its gradient for every parameter.
pub fn batch_gradients(model: &SyncTransformer, batch: &[Sample]) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch".into()));
    }
    let mut grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (i, sample) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let loss = model.loss_graph(&mut g, &p, &sample.features, &sample.labels).map_err(|e| match e {
            Error::DegenerateLattice | Error::Numeric(_) => non_finite(i, sample, &e.to_string()),
            e => e,
        })?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(non_finite(i, sample, &format!("loss {value}")));
        }
        total += value;
        let scaled = g.scale(loss, inv)?;
        g.backward(scaled)?;
        for (acc, &v) in grads.iter_mut().zip(&p) {
            if let Some(t) = g.grad(v) {
                acc.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok((total * inv, grads))
}

fn non_finite(index: usize, sample: &Sample, what: &str) -> Error {
    let f = sample.features.data();
    let (lo, hi) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    Error::NonFiniteLoss {
        sample: index,
        detail: format!(
            "{what}; frames={} labels={:?} feature range=[{lo}, {hi}]",
            sample.features.rows(),
            sample.labels
        ),
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm || max_norm == 0.0 {
        let s = if norm > 0.0 { max_norm / norm } else { 0.0 };
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Corpus-level error rate: total edit distance over total reference length.
pub fn corpus_cer(pairs: impl IntoIterator<Item = (Vec<usize>, Vec<usize>)>) -> Result<f64> {
    let (mut errors, mut total) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        errors += edit_distance(&hyp, &reference);
        total += reference.len();
    }
    if total == 0 {
        return Err(Error::UndefinedMetric);
    }
    Ok(errors as f64 / total as f64)
}

pub fn greedy_cer(model: &SyncTransformer, data: &[Sample], max_symbols_per_chunk: usize) -> Result<f64> {
    let pairs = data
        .iter()
        .map(|s| Ok((greedy_decode_features(model, &s.features, max_symbols_per_chunk)?.symbols, s.labels.clone())))
        .collect::<Result<Vec<_>>>()?;
    corpus_cer(pairs)
}

pub fn beam_cer(model: &SyncTransformer, data: &[Sample], cfg: &BeamConfig) -> Result<f64> {
    let pairs = data
        .iter()
        .map(|s| {
            let best = beam_decode_features(model, &s.features, cfg)?.swap_remove(0);
            Ok((best.symbols, s.labels.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    corpus_cer(pairs)
}

/// Progress report handed to the evaluation callback.
#[derive(Clone, Copy, Debug)]
pub struct Progress {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Adam,
    d_model: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &SyncTransformer) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model.params().tensors().iter().map(Tensor::numel));
        Ok(Trainer { config, optimizer, d_model: model.config().d_model })
    }

    /// Continues from a saved optimizer state.
    pub fn resume(config: TrainConfig, model: &SyncTransformer, state: AdamState) -> Result<Self> {
        let mut t = Trainer::new(config, model)?;
        if state.m.len() != t.optimizer.state.m.len() {
            return Err(Error::Shape("optimizer state does not match the model".into()));
        }
        t.optimizer = Adam::with_state(state);
        Ok(t)
    }

    /// Updates taken so far.
    pub fn step(&self) -> u64 {
        self.optimizer.state.step
    }

    /// Learning rate of the next update.
    pub fn next_lr(&self) -> Result<f64> {
        noam_lr(self.step() + 1, self.d_model, self.config.warmup_steps, self.config.lr_scale)
    }

    /// One optimizer update on `batch`; returns the mean loss before the update.
    pub fn train_step(&mut self, model: &mut SyncTransformer, batch: &[Sample]) -> Result<f64> {
        let lr = self.next_lr()?;
        self.train_step_with_lr(model, batch, lr)
    }

    pub fn train_step_with_lr(&mut self, model: &mut SyncTransformer, batch: &[Sample], lr: f64) -> Result<f64> {
        let (loss, mut grads) = batch_gradients(model, batch)?;
        clip_global_norm(&mut grads, self.config.clip_norm);
        self.optimizer.apply(model.params_mut().tensors_mut(), &grads, lr)?;
        Ok(loss)
    }

    /// Indices of the batch for the next update, a pure function of the seed
    /// and the step so that resumed runs draw the same batches.
    pub fn batch_indices(&self, n: usize) -> Vec<usize> {
        let step = self.step();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        (0..self.config.batch_size).map(|_| rng.random_range(0..n)).collect()
    }

    /// Trains until `total_steps`. Every `eval_interval` steps `on_eval` is
    /// called; returning `true` stops training. Returns the loss trajectory.
    pub fn run(
        &mut self,
        model: &mut SyncTransformer,
        data: &[Sample],
        mut on_eval: impl FnMut(Progress, &SyncTransformer) -> Result<bool>,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyInput("training set".into()));
        }
        let mut losses = Vec::new();
        while self.step() < self.config.total_steps {
            let lr = self.next_lr()?;
            let batch: Vec<Sample> = self.batch_indices(data.len()).into_iter().map(|i| data[i].clone()).collect();
            let loss = self.train_step_with_lr(model, &batch, lr)?;
            losses.push(loss);
            let step = self.step();
            let eval_now = self.config.eval_interval > 0 && step.is_multiple_of(self.config.eval_interval);
            if (eval_now || step == self.config.total_steps) && on_eval(Progress { step, loss, lr }, model)? {
                break;
            }
        }
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_examples() {
        let peak = noam_lr(1000, 64, 1000, 2.0).unwrap();
        assert!((peak - 2.0 / 8.0 / 1000f64.sqrt()).abs() < 1e-15);
        let first = noam_lr(1, 256, 1000, 1.0).unwrap();
        assert!((first - 1.0 / (16.0 * 1000f64.powf(1.5))).abs() < 1e-18);
        assert!(matches!(noam_lr(0, 64, 10, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut g = vec![vec![0.1, 0.2]];
        clip_global_norm(&mut g, 5.0);
        assert_eq!(g, vec![vec![0.1, 0.2]]);
        clip_global_norm(&mut g, 0.0);
        assert_eq!(g, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()];
        let mut opt = Adam::new([2]);
        opt.apply(&mut p, &[vec![0.5, -2.0]], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
        assert!((p[0].data()[1] - 1.1).abs() < 1e-8);
    }

    #[test]
    fn corpus_cer_pools_counts() {
        let c = corpus_cer([(vec![1, 2], vec![1, 2, 3]), (vec![4], vec![5])]).unwrap();
        assert!((c - 0.5).abs() < 1e-15);
        assert!(matches!(corpus_cer(Vec::new()), Err(Error::UndefinedMetric)));
    }
}
