mod common;

use common::{desk, rng, small};
use fdvrm::alpha::{objective_at, OuterConfig};
use fdvrm::{run_algorithm2, solve_alpha, AdmmConfig, RelaxedProblem, Scheme};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn outer_objective_never_decreases() {
    for (seed, init) in [(0, 0.2), (1, 0.5), (2, 0.8), (3, 0.1), (4, 0.9)] {
        let s = desk(seed);
        let cfg = OuterConfig { alpha_init: vec![init], ..OuterConfig::default() };
        let rep = run_algorithm2(&s, Scheme::default(), &cfg).unwrap();
        for w in rep.history.windows(2) {
            let (a, b) = (w[0].objective, w[1].objective);
            assert!(b >= a - 1e-6 * a.abs(), "seed {seed}: {a:e} -> {b:e}");
        }
    }
}

fn recovered(seed: u64) -> (fdvrm::Scenario, fdvrm::AllocationPoint) {
    let s = small(seed, 3, 2);
    let cfg = AdmmConfig { max_iter: 80, ..AdmmConfig::default() };
    let point = {
        let p = RelaxedProblem::new(&s, &[0.5, 0.5], Scheme::default()).unwrap();
        fdvrm::run_admm(&p, &cfg).unwrap().point
    };
    (s, point)
}

#[test]
fn split_of_one_inp_ignores_the_other() {
    for seed in 0..3 {
        let (s, point) = recovered(seed);
        let rec = point.recovered.as_ref().unwrap();
        let per = s.bs_per_inp();
        let base = solve_alpha(0, &point.x, &rec.y, &rec.z, &s, Default::default(), 0.5).unwrap();
        let mut y = rec.y.clone();
        let mut z = rec.z.clone();
        for c in per..2 * per {
            y.column_mut(c).mapv_inplace(|v| 0.3 * v);
            z[c] *= 0.3;
        }
        let moved = solve_alpha(0, &point.x, &y, &z, &s, Default::default(), 0.5).unwrap();
        assert_eq!(base.to_bits(), moved.to_bits(), "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn split_update_does_not_lower_the_objective(seed in 0u64..3, draw in any::<u64>()) {
        let (s, point) = recovered(seed);
        let rec = point.recovered.as_ref().unwrap();
        let mut r = rng(draw);
        let alpha: Vec<f64> = (0..2).map(|_| r.random_range(0.0..1.0)).collect();
        let next: Vec<f64> = (0..2)
            .map(|m| solve_alpha(m, &point.x, &rec.y, &rec.z, &s, Default::default(), alpha[m]).unwrap())
            .collect();
        let before = objective_at(&point, &s, &alpha, Default::default()).unwrap().total_vrm;
        let after = objective_at(&point, &s, &next, Default::default()).unwrap().total_vrm;
        prop_assert!(after >= before - 1e-9 * before.abs(), "{before:e} -> {after:e}");
    }
}
