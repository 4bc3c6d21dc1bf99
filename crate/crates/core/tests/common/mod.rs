#![allow(dead_code)]

use fdvrm::{generate_scenario, AllocationPoint, RelaxedProblem, Scenario, ScenarioConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two InPs, one small cell each, four users.
pub fn desk(seed: u64) -> Scenario {
    generate_scenario(&ScenarioConfig {
        sbs_per_inp: 1,
        users_per_mvno: 2,
        rng_seed: seed,
        ..ScenarioConfig::default()
    })
    .unwrap()
}

pub fn small(seed: u64, users_per_mvno: usize, sbs_per_inp: usize) -> Scenario {
    generate_scenario(&ScenarioConfig {
        sbs_per_inp,
        users_per_mvno,
        rng_seed: seed,
        ..ScenarioConfig::default()
    })
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Strictly positive association rows over candidates and shares strictly
/// inside `(0, x)`.
pub fn interior_point(problem: &RelaxedProblem<'_>, rng: &mut ChaCha8Rng) -> AllocationPoint {
    let (users, cols) = (problem.num_users(), problem.num_cols());
    let mut x = Array2::zeros((users, cols));
    let mut ytilde = Array2::zeros((users, cols));
    for u in 0..users {
        let mut sum = 0.0;
        for c in 0..cols {
            if problem.candidates[[u, c]] {
                x[[u, c]] = rng.random_range(0.05..1.0);
                sum += x[[u, c]];
            }
        }
        for c in 0..cols {
            if problem.candidates[[u, c]] {
                x[[u, c]] /= sum;
                ytilde[[u, c]] = x[[u, c]] * rng.random_range(0.05..0.95) / users as f64;
            }
        }
    }
    AllocationPoint { x, ytilde, recovered: None }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}
