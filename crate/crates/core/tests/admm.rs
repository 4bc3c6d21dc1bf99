mod common;

use common::{desk, rng, small};
use fdvrm::admm::{dual_update, global_update};
use fdvrm::{run_admm, AdmmConfig, RelaxedProblem, Scheme, Termination};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn random(r: &mut rand_chacha::ChaCha8Rng, u: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((u, c), |_| r.random_range(-scale..scale))
}

proptest! {
    #[test]
    fn multipliers_sum_to_zero_after_an_update(draw in any::<u64>(), m in 2usize..5, u in 1usize..6, c in 1usize..6, rho in 1.0f64..1e8) {
        let mut r = rng(draw);
        let local: Vec<_> = (0..m).map(|_| random(&mut r, u, c, 1.0)).collect();
        let mut lambda: Vec<_> = (0..m).map(|_| random(&mut r, u, c, rho)).collect();
        let global = global_update(&local, &lambda, rho);
        for (l, xz) in lambda.iter_mut().zip(&local) {
            dual_update(l, xz, &global, rho);
        }
        let mut sum = Array2::<f64>::zeros((u, c));
        for l in &lambda {
            sum += l;
        }
        let scale = lambda.iter().flat_map(|l| l.iter()).fold(rho, |a, v| a.max(v.abs()));
        prop_assert!(sum.iter().all(|v| v.abs() <= 1e-12 * scale));
    }
}

#[test]
fn runs_are_deterministic() {
    let s = small(3, 3, 2);
    let p = RelaxedProblem::new(&s, &[0.5, 0.5], Scheme::default()).unwrap();
    let cfg = AdmmConfig { max_iter: 60, ..AdmmConfig::default() };
    let a = run_admm(&p, &cfg).unwrap();
    let b = run_admm(&p, &cfg).unwrap();
    assert_eq!(a.point.x, b.point.x);
    assert_eq!(a.point.ytilde, b.point.ytilde);
    assert_eq!(a.trace.len(), b.trace.len());
    for (ra, rb) in a.trace.iter().zip(&b.trace) {
        assert_eq!(ra.objective.to_bits(), rb.objective.to_bits());
        assert_eq!(ra.consensus_gap.to_bits(), rb.consensus_gap.to_bits());
    }
}

#[test]
fn desk_solutions_are_binary_feasible_and_tight() {
    let cfg = AdmmConfig::default();
    for seed in 0..20 {
        let s = desk(seed);
        for scheme in ["virt+fd", "virt", "fd", "baseline"] {
            let p = RelaxedProblem::new(&s, &[0.5, 0.5], scheme.parse().unwrap()).unwrap();
            let rep = run_admm(&p, &cfg).unwrap();
            let last = rep.trace.last().unwrap();
            if rep.termination == Termination::Converged {
                assert!(last.consensus_gap <= 10.0 * cfg.xi2, "seed {seed} {scheme}: gap {}", last.consensus_gap);
            }
            for w in rep.trace.windows(2) {
                assert!(w[1].best_objective >= w[0].best_objective);
            }
            for u in 0..p.num_users() {
                let row = rep.point.x.row(u);
                assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1, "seed {seed} {scheme} user {u}");
                assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), p.num_cols() - 1);
            }
            let bad = p.check_feasible(&rep.point, 1e-7);
            assert!(bad.is_empty(), "seed {seed} {scheme}: {bad:?}");
            let slack = p.backhaul_slack(&rep.point);
            assert!(slack <= 1e-7, "seed {seed} {scheme}: slack {slack:e}");
        }
    }
}
