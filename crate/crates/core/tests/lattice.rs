mod common;

use common::rng;
use proptest::prelude::*;
use sync_transformer::diagnostics::{lattice_gradient_check, random_lattice};
use sync_transformer::lattice::{
    backward_pass, diagonal_identity_check, enumerate_paths, forward_pass, lattice_grad, mean_nll, LatticeProbs,
};
use sync_transformer::Error;

fn binomial(n: u64, k: u64) -> u64 {
    (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
}

/// Linear-domain dynamic programme over the lattice, written independently
/// of the log-domain recursions.
fn linear_forward(p: &LatticeProbs) -> f64 {
    let (mm, uu) = (p.chunks(), p.labels());
    let mut a = vec![vec![0.0f64; uu + 1]; mm];
    a[0][0] = 1.0;
    for m in 0..mm {
        for u in 0..=uu {
            if m > 0 {
                a[m][u] += a[m - 1][u] * p.blank(m - 1, u).exp();
            }
            if u > 0 {
                a[m][u] += a[m][u - 1] * p.label(m, u - 1).exp();
            }
        }
    }
    a[mm - 1][uu] * p.blank(mm - 1, uu).exp()
}

fn two_by_one() -> LatticeProbs {
    LatticeProbs::from_fn(2, 1, |m, u| [[0.6f64, 0.5], [0.1, 0.7]][m][u].ln(), |m, _| [0.3f64, 0.2][m].ln()).unwrap()
}

#[test]
fn hand_worked_two_chunk_lattice() {
    let p = two_by_one();
    let fwd = forward_pass(&p).unwrap();
    assert!((fwd.log_prob.exp() - 0.189).abs() < 1e-15);
    let beta = backward_pass(&p).unwrap();
    assert!((beta.get(0, 0) - 0.189f64.ln()).abs() < 1e-12);
    assert!(diagonal_identity_check(&fwd.alpha, &beta, fwd.log_prob) <= 1e-12);
    let g = lattice_grad(&p).unwrap();
    // Both paths end with blank(1,1).
    assert!((g.grad_blank[3] - 1.0).abs() < 1e-12);
    let e = enumerate_paths(&p).unwrap();
    assert_eq!(e.paths, 2);
    assert!((e.log_prob.exp() - 0.189).abs() < 1e-15);
}

#[test]
fn single_node_lattice() {
    let p = LatticeProbs::new(1, 0, vec![0.7f64.ln()], vec![]).unwrap();
    let fwd = forward_pass(&p).unwrap();
    assert!((fwd.log_prob - 0.7f64.ln()).abs() < 1e-15);
    let beta = backward_pass(&p).unwrap();
    assert_eq!(beta.get(0, 0), 0.7f64.ln());
    assert_eq!(diagonal_identity_check(&fwd.alpha, &beta, fwd.log_prob), 0.0);
    assert!((lattice_grad(&p).unwrap().grad_blank[0] - 1.0).abs() < 1e-15);
}

#[test]
fn one_chunk_forces_one_path() {
    let p = LatticeProbs::from_fn(1, 2, |_, u| [0.1f64, 0.2, 0.3][u].ln(), |_, u| [0.4f64, 0.5][u].ln()).unwrap();
    let e = enumerate_paths(&p).unwrap();
    assert_eq!(e.paths, 1);
    assert!((e.log_prob.exp() - 0.4 * 0.5 * 0.3).abs() < 1e-15);
}

#[test]
fn stars_and_bars_path_counts() {
    assert_eq!(enumerate_paths(&random_lattice(&mut rng(1), 3, 2)).unwrap().paths, 6);
    for m in 1..=8 {
        for u in 0..=8 {
            let p = random_lattice(&mut rng(2), m, u);
            assert_eq!(enumerate_paths(&p).unwrap().paths, binomial((u + m - 1) as u64, (m - 1) as u64));
        }
    }
    let too_big = random_lattice(&mut rng(3), 9, 1);
    assert!(matches!(enumerate_paths(&too_big), Err(Error::Capacity(_))));
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(4);
    for (m, u) in [(4, 3), (1, 4), (5, 0), (3, 5)] {
        let p = random_lattice(&mut r, m, u);
        let rep = lattice_gradient_check(&p, 1e-6).unwrap();
        assert!(rep.max_rel <= 1e-6, "{m}x{u}: {} at {}", rep.max_rel, rep.worst);
    }
}

#[test]
fn forward_backward_agree_on_a_3x5_lattice() {
    let p = random_lattice(&mut rng(5), 3, 5);
    let lp = forward_pass(&p).unwrap().log_prob;
    assert!((backward_pass(&p).unwrap().get(0, 0) - lp).abs() <= 1e-12);
}

#[test]
fn degenerate_and_invalid_inputs() {
    let dead = LatticeProbs::new(1, 1, vec![0.0, f64::NEG_INFINITY], vec![0.0]).unwrap();
    assert!(matches!(lattice_grad(&dead), Err(Error::DegenerateLattice)));
    assert!(matches!(LatticeProbs::new(1, 0, vec![f64::NAN], vec![]), Err(Error::Numeric(_))));
    assert!(matches!(mean_nll(&[]), Err(Error::EmptyInput(_))));
}

#[test]
fn batch_loss_is_the_mean() {
    let a = random_lattice(&mut rng(6), 2, 2);
    let b = random_lattice(&mut rng(7), 3, 1);
    let la = -forward_pass(&a).unwrap().log_prob;
    let lb = -forward_pass(&b).unwrap().log_prob;
    assert!((mean_nll(&[a, b]).unwrap() - (la + lb) / 2.0).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn forward_matches_oracles(m in 1usize..=5, u in 0usize..=5, seed in any::<u64>()) {
        let p = random_lattice(&mut rng(seed), m, u);
        let lp = forward_pass(&p).unwrap().log_prob;
        let enumerated = enumerate_paths(&p).unwrap().log_prob.exp();
        prop_assert!((lp.exp() - enumerated).abs() <= 1e-10 * enumerated);
        let linear = linear_forward(&p);
        prop_assert!((lp.exp() - linear).abs() <= 1e-10 * linear);
    }

    #[test]
    fn diagonal_identity_holds(m in 1usize..=8, u in 0usize..=8, seed in any::<u64>()) {
        let p = random_lattice(&mut rng(seed), m, u);
        let fwd = forward_pass(&p).unwrap();
        let beta = backward_pass(&p).unwrap();
        prop_assert!((beta.get(0, 0) - fwd.log_prob).abs() <= 1e-12);
        prop_assert!(diagonal_identity_check(&fwd.alpha, &beta, fwd.log_prob) <= 1e-9);
    }

    #[test]
    fn gradients_are_edge_occupancies(m in 1usize..=6, u in 0usize..=6, seed in any::<u64>()) {
        let p = random_lattice(&mut rng(seed), m, u);
        let g = lattice_grad(&p).unwrap();
        prop_assert!(g.grad_blank.iter().chain(&g.grad_label).all(|&x| (-1e-15..=1.0 + 1e-12).contains(&x)));
        // Every path takes exactly one blank per chunk and emits each label once.
        for c in 0..m {
            let s: f64 = g.grad_blank[c * (u + 1)..(c + 1) * (u + 1)].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        for k in 0..u {
            let s: f64 = (0..m).map(|c| g.grad_label[c * u + k]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}
