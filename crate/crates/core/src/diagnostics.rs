//! Finite-difference and enumeration checks shared by the CLI and tests.

use rand::Rng;

use crate::error::Result;
use crate::lattice::{self, LatticeProbs};
use crate::model::SyncTransformer;
use crate::tensor::Graph;
use crate::train::{batch_gradients, Sample};

/// Smallest denominator used when comparing two gradient entries.
pub const GRAD_REL_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, GRAD_REL_FLOOR)`.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_REL_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    /// Location of the largest relative deviation.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        self.max_abs = self.max_abs.max((analytic - numeric).abs());
        let r = rel_diff(analytic, numeric);
        if r > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(r);
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", at());
        }
    }
}

/// Mean lattice loss over `batch` without recording gradients.
pub fn mean_loss(model: &SyncTransformer, batch: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let loss = model.loss_graph(&mut g, &p, &s.features, &s.labels)?;
        total += g.value(loss).item();
    }
    Ok(total / batch.len() as f64)
}

/// Compares backpropagated gradients of the mean loss with central
/// differences for every `stride`-th scalar parameter.
pub fn model_gradient_check(
    model: &SyncTransformer,
    batch: &[Sample],
    eps: f64,
    stride: usize,
) -> Result<GradCheckReport> {
    let (_, grads) = batch_gradients(model, batch)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport::default();
    let mut flat = 0usize;
    for (t, grad) in grads.iter().enumerate() {
        for (i, &analytic) in grad.iter().enumerate() {
            flat += 1;
            if !(flat - 1).is_multiple_of(stride.max(1)) {
                continue;
            }
            let orig = probe.params().tensors()[t].data()[i];
            probe.params_mut().tensors_mut()[t].data_mut()[i] = orig + eps;
            let up = mean_loss(&probe, batch)?;
            probe.params_mut().tensors_mut()[t].data_mut()[i] = orig - eps;
            let down = mean_loss(&probe, batch)?;
            probe.params_mut().tensors_mut()[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            report.record(analytic, numeric, || format!("{}[{i}]", model.params().names()[t]));
        }
    }
    Ok(report)
}

/// Central differences of `−log p` against [`lattice::lattice_grad`] for
/// every blank and label entry.
pub fn lattice_gradient_check(probs: &LatticeProbs, eps: f64) -> Result<GradCheckReport> {
    let loss = lattice::lattice_grad(probs)?;
    let nll = |b: &[f64], l: &[f64]| -> Result<f64> {
        let p = LatticeProbs::new(probs.chunks(), probs.labels(), b.to_vec(), l.to_vec())?;
        Ok(-lattice::forward_pass(&p)?.log_prob)
    };
    let mut report = GradCheckReport::default();
    let (mut b, mut l) = (probs.blank_table().to_vec(), probs.label_table().to_vec());
    for i in 0..b.len() {
        let orig = b[i];
        b[i] = orig + eps;
        let up = nll(&b, &l)?;
        b[i] = orig - eps;
        let down = nll(&b, &l)?;
        b[i] = orig;
        report.record(-loss.grad_blank[i], (up - down) / (2.0 * eps), || format!("blank[{i}]"));
    }
    for i in 0..l.len() {
        let orig = l[i];
        l[i] = orig + eps;
        let up = nll(&b, &l)?;
        l[i] = orig - eps;
        let down = nll(&b, &l)?;
        l[i] = orig;
        report.record(-loss.grad_label[i], (up - down) / (2.0 * eps), || format!("label[{i}]"));
    }
    Ok(report)
}

/// Lattice whose entries are logs of probabilities drawn from `(0.05, 1)`.
pub fn random_lattice(rng: &mut impl Rng, chunks: usize, labels: usize) -> LatticeProbs {
    let blank = (0..chunks * (labels + 1)).map(|_| rng.random_range(0.05f64..1.0).ln()).collect();
    let label = (0..chunks * labels).map(|_| rng.random_range(0.05f64..1.0).ln()).collect();
    LatticeProbs::new(chunks, labels, blank, label).expect("sizes match")
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OracleReport {
    pub lattices: usize,
    /// Largest relative deviation of the forward probability from the path sum.
    pub max_rel: f64,
    /// Largest deviation of any anti-diagonal sum from `log p`.
    pub max_diagonal: f64,
}

/// Forward pass against brute-force path enumeration, and the anti-diagonal
/// identity, on `trials` random lattices per `(M, U)` with `M ≤ max_chunks`,
/// `U ≤ max_labels`.
pub fn lattice_oracle_check(
    rng: &mut impl Rng,
    max_chunks: usize,
    max_labels: usize,
    trials: usize,
) -> Result<OracleReport> {
    let mut rep = OracleReport::default();
    for m in 1..=max_chunks {
        for u in 0..=max_labels {
            for _ in 0..trials {
                let probs = random_lattice(rng, m, u);
                let fwd = lattice::forward_pass(&probs)?;
                let enumerated = lattice::enumerate_paths(&probs)?;
                let (a, b) = (fwd.log_prob.exp(), enumerated.log_prob.exp());
                rep.max_rel = rep.max_rel.max((a - b).abs() / b);
                let beta = lattice::backward_pass(&probs)?;
                rep.max_diagonal =
                    rep.max_diagonal.max(lattice::diagonal_identity_check(&fwd.alpha, &beta, fwd.log_prob));
                rep.lattices += 1;
            }
        }
    }
    Ok(rep)
}
