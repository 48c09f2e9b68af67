//! Forward-backward over the chunk × label output probability lattice.
//!
//! Node `(m, u)` means "positioned in chunk `m` (0-based) with `u` target
//! labels already emitted". From a node the decoder either emits the next
//! label (`u → u+1`, same chunk) or a blank (`m → m+1`, same `u`). Every
//! alignment path starts at `(0, 0)` and ends with the blank emitted from
//! `(M-1, U)`. All arithmetic is in the log domain.

use crate::error::{Error, Result};

/// `ln(e^a + e^b)` that treats `-∞` as probability zero.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Per-node blank and label log-probabilities for one target sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeProbs {
    chunks: usize,
    labels: usize,
    blank: Vec<f64>,
    label: Vec<f64>,
}

impl LatticeProbs {
    /// `blank` is `chunks × (labels+1)`, `label` is `chunks × labels`, both
    /// row-major by chunk.
    pub fn new(chunks: usize, labels: usize, blank: Vec<f64>, label: Vec<f64>) -> Result<Self> {
        if chunks == 0 {
            return Err(Error::Contract("lattice needs at least one chunk".into()));
        }
        if blank.len() != chunks * (labels + 1) || label.len() != chunks * labels {
            return Err(Error::Shape(format!(
                "lattice {chunks}x{labels}: got {} blank and {} label entries",
                blank.len(),
                label.len()
            )));
        }
        if blank.iter().chain(&label).any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in lattice log-probabilities".into()));
        }
        Ok(LatticeProbs { chunks, labels, blank, label })
    }

    pub fn from_fn(
        chunks: usize,
        labels: usize,
        blank: impl Fn(usize, usize) -> f64,
        label: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut b = Vec::with_capacity(chunks * (labels + 1));
        let mut l = Vec::with_capacity(chunks * labels);
        for m in 0..chunks {
            b.extend((0..=labels).map(|u| blank(m, u)));
            l.extend((0..labels).map(|u| label(m, u)));
        }
        LatticeProbs::new(chunks, labels, b, l)
    }

    pub fn chunks(&self) -> usize {
        self.chunks
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    /// Log-probability of a blank at node `(m, u)`.
    pub fn blank(&self, m: usize, u: usize) -> f64 {
        self.blank[m * (self.labels + 1) + u]
    }

    /// Log-probability of emitting label `u+1` (1-based) at node `(m, u)`.
    pub fn label(&self, m: usize, u: usize) -> f64 {
        self.label[m * self.labels + u]
    }

    pub fn blank_table(&self) -> &[f64] {
        &self.blank
    }

    pub fn label_table(&self) -> &[f64] {
        &self.label
    }
}

/// A `chunks × (labels+1)` table of log-domain node values.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeTable {
    chunks: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatticeTable {
    fn new(chunks: usize, labels: usize) -> Self {
        LatticeTable { chunks, width: labels + 1, data: vec![f64::NEG_INFINITY; chunks * (labels + 1)] }
    }

    pub fn get(&self, m: usize, u: usize) -> f64 {
        self.data[m * self.width + u]
    }

    fn set(&mut self, m: usize, u: usize, v: f64) {
        self.data[m * self.width + u] = v;
    }

    pub fn chunks(&self) -> usize {
        self.chunks
    }

    pub fn labels(&self) -> usize {
        self.width - 1
    }
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub alpha: LatticeTable,
    pub log_prob: f64,
}

/// Result of the loss computation: `log p(y|x)` and its gradient with
/// respect to every lattice log-probability entry.
#[derive(Clone, Debug)]
pub struct LatticeLoss {
    pub log_prob: f64,
    pub grad_blank: Vec<f64>,
    pub grad_label: Vec<f64>,
}

impl LatticeLoss {
    pub fn nll(&self) -> f64 {
        -self.log_prob
    }
}

/// `α(m,u) = α(m-1,u)·blank(m-1,u) + α(m,u-1)·label(m,u-1)`, `α(0,0) = 1`.
pub fn forward_pass(probs: &LatticeProbs) -> Result<ForwardResult> {
    let (mm, uu) = (probs.chunks, probs.labels);
    let mut alpha = LatticeTable::new(mm, uu);
    for m in 0..mm {
        for u in 0..=uu {
            let v = if m == 0 && u == 0 {
                0.0
            } else {
                let from_prev_chunk =
                    if m > 0 { alpha.get(m - 1, u) + probs.blank(m - 1, u) } else { f64::NEG_INFINITY };
                let from_prev_label =
                    if u > 0 { alpha.get(m, u - 1) + probs.label(m, u - 1) } else { f64::NEG_INFINITY };
                log_add(from_prev_chunk, from_prev_label)
            };
            alpha.set(m, u, v);
        }
    }
    let log_prob = alpha.get(mm - 1, uu) + probs.blank(mm - 1, uu);
    Ok(ForwardResult { alpha, log_prob })
}

/// `β(M-1,U) = blank(M-1,U)`;
/// `β(m,u) = β(m+1,u)·blank(m,u) + β(m,u+1)·label(m,u)`.
pub fn backward_pass(probs: &LatticeProbs) -> Result<LatticeTable> {
    let (mm, uu) = (probs.chunks, probs.labels);
    let mut beta = LatticeTable::new(mm, uu);
    for m in (0..mm).rev() {
        for u in (0..=uu).rev() {
            let v = if m == mm - 1 && u == uu {
                probs.blank(m, u)
            } else {
                let to_next_chunk = if m + 1 < mm { beta.get(m + 1, u) + probs.blank(m, u) } else { f64::NEG_INFINITY };
                let to_next_label = if u < uu { beta.get(m, u + 1) + probs.label(m, u) } else { f64::NEG_INFINITY };
                log_add(to_next_chunk, to_next_label)
            };
            beta.set(m, u, v);
        }
    }
    Ok(beta)
}

/// Every path crosses each anti-diagonal `m + u = n` exactly once, so
/// `logsumexp(α+β)` along any diagonal must equal `log_prob`. Returns the
/// largest absolute deviation over all diagonals.
pub fn diagonal_identity_check(alpha: &LatticeTable, beta: &LatticeTable, log_prob: f64) -> f64 {
    let (mm, uu) = (alpha.chunks(), alpha.labels());
    let mut worst: f64 = 0.0;
    for n in 0..mm + uu {
        let mut total = f64::NEG_INFINITY;
        let mut any = false;
        for m in 0..mm {
            if n < m || n - m > uu {
                continue;
            }
            let u = n - m;
            let v = alpha.get(m, u) + beta.get(m, u);
            if v.is_finite() {
                any = true;
                total = log_add(total, v);
            }
        }
        if any {
            worst = worst.max((total - log_prob).abs());
        }
    }
    worst
}

/// Log-probability of the target and its gradient w.r.t. every log-prob
/// entry. Each gradient is the posterior occupancy of the corresponding
/// lattice edge, so entries lie in `[0, 1]`.
pub fn lattice_grad(probs: &LatticeProbs) -> Result<LatticeLoss> {
    let fwd = forward_pass(probs)?;
    let log_prob = fwd.log_prob;
    if !log_prob.is_finite() {
        return Err(Error::DegenerateLattice);
    }
    let beta = backward_pass(probs)?;
    let alpha = &fwd.alpha;
    let (mm, uu) = (probs.chunks, probs.labels);
    let mut grad_blank = vec![0.0; mm * (uu + 1)];
    let mut grad_label = vec![0.0; mm * uu];
    for m in 0..mm {
        for u in 0..=uu {
            let a = alpha.get(m, u);
            let after_blank = if m + 1 < mm {
                beta.get(m + 1, u)
            } else if u == uu {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad_blank[m * (uu + 1) + u] = (a + probs.blank(m, u) + after_blank - log_prob).exp();
            if u < uu {
                grad_label[m * uu + u] = (a + probs.label(m, u) + beta.get(m, u + 1) - log_prob).exp();
            }
        }
    }
    Ok(LatticeLoss { log_prob, grad_blank, grad_label })
}

/// Mean negative log-likelihood over a batch of lattices.
pub fn mean_nll(batch: &[LatticeProbs]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty lattice batch".into()));
    }
    let mut total = 0.0;
    for p in batch {
        let lp = forward_pass(p)?.log_prob;
        if !lp.is_finite() {
            return Err(Error::DegenerateLattice);
        }
        total -= lp;
    }
    Ok(total / batch.len() as f64)
}

pub const MAX_ENUMERATION_CHUNKS: usize = 8;
pub const MAX_ENUMERATION_LABELS: usize = 8;

#[derive(Clone, Copy, Debug)]
pub struct PathSum {
    pub log_prob: f64,
    pub paths: u64,
}

/// Brute-force sum over every alignment path.
///
/// A path is a composition `k_0 + … + k_{M-1} = U`: chunk `m` emits `k_m`
/// labels then a blank. Kept independent of the recursions above so it can
/// serve as their oracle.
pub fn enumerate_paths(probs: &LatticeProbs) -> Result<PathSum> {
    let (mm, uu) = (probs.chunks, probs.labels);
    if mm > MAX_ENUMERATION_CHUNKS || uu > MAX_ENUMERATION_LABELS {
        return Err(Error::Capacity(format!(
            "enumeration limited to {MAX_ENUMERATION_CHUNKS} chunks and \
             {MAX_ENUMERATION_LABELS} labels, got {mm}x{uu}"
        )));
    }
    let mut counts = vec![0usize; mm];
    let mut sum = PathSum { log_prob: f64::NEG_INFINITY, paths: 0 };
    compositions(&mut counts, 0, uu, &mut |ks| {
        let mut lp = 0.0;
        let mut emitted = 0;
        for (m, &k) in ks.iter().enumerate() {
            for u in emitted..emitted + k {
                lp += probs.label(m, u);
            }
            emitted += k;
            lp += probs.blank(m, emitted);
        }
        sum.log_prob = log_add(sum.log_prob, lp);
        sum.paths += 1;
    });
    Ok(sum)
}

fn compositions(counts: &mut [usize], at: usize, remaining: usize, visit: &mut dyn FnMut(&[usize])) {
    if at + 1 == counts.len() {
        counts[at] = remaining;
        visit(counts);
        return;
    }
    for k in 0..=remaining {
        counts[at] = k;
        compositions(counts, at + 1, remaining - k, visit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_one() -> LatticeProbs {
        // chunk 0: blank(0,0)=.6, label(0,0)=.3, blank(0,1)=.5
        // chunk 1: label(1,0)=.2, blank(1,1)=.7
        LatticeProbs::new(
            2,
            1,
            vec![0.6f64.ln(), 0.5f64.ln(), 0.1f64.ln(), 0.7f64.ln()],
            vec![0.3f64.ln(), 0.2f64.ln()],
        )
        .unwrap()
    }

    #[test]
    fn empty_target_single_chunk() {
        let p = LatticeProbs::new(1, 0, vec![0.7f64.ln()], vec![]).unwrap();
        let f = forward_pass(&p).unwrap();
        assert!((f.log_prob - 0.7f64.ln()).abs() < 1e-15);
        let b = backward_pass(&p).unwrap();
        assert_eq!(b.get(0, 0), 0.7f64.ln());
        assert_eq!(diagonal_identity_check(&f.alpha, &b, f.log_prob), 0.0);
        let g = lattice_grad(&p).unwrap();
        assert!((g.grad_blank[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_paths_sum_to_hand_value() {
        let p = two_by_one();
        let want = 0.3 * 0.5 * 0.7 + 0.6 * 0.2 * 0.7;
        assert!((want - 0.189f64).abs() < 1e-15);
        let f = forward_pass(&p).unwrap();
        assert!((f.log_prob.exp() - want).abs() < 1e-14);
        let b = backward_pass(&p).unwrap();
        assert!((b.get(0, 0) - want.ln()).abs() < 1e-14);
        assert!(diagonal_identity_check(&f.alpha, &b, f.log_prob) < 1e-12);
        let e = enumerate_paths(&p).unwrap();
        assert_eq!(e.paths, 2);
        assert!((e.log_prob.exp() - want).abs() < 1e-14);
    }

    #[test]
    fn terminal_blank_gradient_is_one() {
        let g = lattice_grad(&two_by_one()).unwrap();
        // blank(1,1) is on every path
        assert!((g.grad_blank[3] - 1.0).abs() < 1e-12);
        // blank(1,0) leads nowhere
        assert_eq!(g.grad_blank[2], 0.0);
        // label occupancies: path A uses label(0,0), path B label(1,0)
        let pa = 0.3 * 0.5 * 0.7 / 0.189;
        assert!((g.grad_label[0] - pa).abs() < 1e-12);
        assert!((g.grad_label[1] - (1.0 - pa)).abs() < 1e-12);
    }

    #[test]
    fn single_chunk_has_single_path() {
        let p = LatticeProbs::new(1, 2, vec![0.1f64.ln(), 0.2f64.ln(), 0.4f64.ln()], vec![0.5f64.ln(), 0.6f64.ln()])
            .unwrap();
        let e = enumerate_paths(&p).unwrap();
        assert_eq!(e.paths, 1);
        assert!((e.log_prob.exp() - 0.5 * 0.6 * 0.4).abs() < 1e-15);
    }

    #[test]
    fn stars_and_bars_count() {
        let p = LatticeProbs::from_fn(3, 2, |_, _| -1.0, |_, _| -1.0).unwrap();
        assert_eq!(enumerate_paths(&p).unwrap().paths, 6);
    }

    #[test]
    fn enumeration_guard() {
        let p = LatticeProbs::from_fn(9, 1, |_, _| -1.0, |_, _| -1.0).unwrap();
        assert!(matches!(enumerate_paths(&p), Err(Error::Capacity(_))));
    }

    #[test]
    fn degenerate_lattice_is_an_error() {
        let p = LatticeProbs::new(1, 0, vec![f64::NEG_INFINITY], vec![]).unwrap();
        assert!(matches!(lattice_grad(&p), Err(Error::DegenerateLattice)));
    }

    #[test]
    fn nan_input_rejected() {
        let r = LatticeProbs::new(1, 0, vec![f64::NAN], vec![]);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn log_add_handles_neg_infinity() {
        assert_eq!(log_add(f64::NEG_INFINITY, -2.0), -2.0);
        assert_eq!(log_add(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert!((log_add(0.5f64.ln(), 0.25f64.ln()) - 0.75f64.ln()).abs() < 1e-15);
    }
}
