//! Spectrum split update and the alternating outer loop.
//!
//! With the association, shares and backhaul slots held fixed, every rate
//! scales with `alpha` or `1 - alpha`, so each InP's part of the objective is
//! a strictly concave scalar function of its own split. The outer loop
//! alternates an ADMM solve at fixed split with this per-InP update.

use std::io::Write;

use ndarray::Array2;

use crate::admm::{run_admm, AdmmConfig, SolveReport};
use crate::error::{Error, Result};
use crate::rates::build_rate_table;
use crate::relaxed::{AllocationPoint, RelaxedProblem, Scheme};
use crate::scenario::{BsId, Scenario};
use crate::utility::{self, BackhaulPricing, UtilityBreakdown};

/// Split-independent pieces of one InP's objective for a fixed allocation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct SplitTerms {
    macro_payment: f64,
    small_payment: f64,
    /// Resource price per unit share and unit split.
    macro_cost: f64,
    small_cost: f64,
    /// `-Q` has the form `-backhaul (1 - alpha)^2`.
    backhaul: f64,
}

impl SplitTerms {
    fn derivative(&self, a: f64) -> f64 {
        let mut d = -self.macro_cost + self.small_cost + 2.0 * (1.0 - a) * self.backhaul;
        if self.macro_payment > 0.0 {
            d += self.macro_payment / a;
        }
        if self.small_payment > 0.0 {
            d -= self.small_payment / (1.0 - a);
        }
        d
    }
}

fn split_terms(
    m: usize,
    x: &Array2<f64>,
    y: &Array2<f64>,
    z: &[f64],
    scenario: &Scenario,
    pricing: BackhaulPricing,
) -> Result<SplitTerms> {
    // spectral efficiencies: rates at split 1/2 divided by half the band
    let half = vec![0.5; scenario.num_inps()];
    let rates = build_rate_table(scenario, &half)?;
    let bw = scenario.bandwidth(m);
    let gamma = scenario.price(m);
    let mut t = SplitTerms::default();
    for slot in 0..scenario.bs_per_inp() {
        let bs = BsId { inp: m, slot };
        let c = scenario.col(bs);
        let mut carried = 0.0;
        let mut ysum = 0.0;
        for u in 0..scenario.num_users() {
            if x[[u, c]] <= 0.0 {
                continue;
            }
            let delta = scenario.payment(u) * x[[u, c]];
            let share = x[[u, c]] * y[[u, c]];
            ysum += share;
            carried += share * rates.access[[u, c]] / (0.5 * bw);
            if bs.is_macro() {
                t.macro_payment += delta;
            } else {
                t.small_payment += delta;
            }
        }
        if bs.is_macro() {
            t.macro_cost += gamma * bw * scenario.macro_power_w(m) * ysum;
        } else {
            t.small_cost += gamma * scenario.sbs_weight(m) * bw * scenario.sbs_power_w(m) * ysum;
            let zeta = match pricing {
                BackhaulPricing::SelfBackhaul => z[c],
                BackhaulPricing::External => 1.0,
            };
            t.backhaul += scenario.macro_power_w(m) * bw * zeta * carried;
        }
    }
    Ok(t)
}

/// Best spectrum split of InP `m` for a fixed recovered allocation.
///
/// The backhaul constraint scales identically on both sides, so the whole
/// interval `[0, 1]` is feasible; the maximizer is found by bisection on the
/// derivative. An InP serving nobody keeps `current`.
pub fn solve_alpha(
    m: usize,
    x: &Array2<f64>,
    y: &Array2<f64>,
    z: &[f64],
    scenario: &Scenario,
    pricing: BackhaulPricing,
    current: f64,
) -> Result<f64> {
    if m >= scenario.num_inps() {
        return Err(Error::InvalidArgument(format!("no InP {m}")));
    }
    let t = split_terms(m, x, y, z, scenario, pricing)?;
    if t.macro_payment == 0.0 && t.small_payment == 0.0 {
        return Ok(current);
    }
    if t.macro_payment == 0.0 && t.derivative(0.0) <= 0.0 {
        return Ok(0.0);
    }
    if t.small_payment == 0.0 && t.derivative(1.0) >= 0.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if t.derivative(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Objective of a fixed recovered allocation re-evaluated at split `alpha`.
pub fn objective_at(point: &AllocationPoint, scenario: &Scenario, alpha: &[f64], pricing: BackhaulPricing) -> Result<UtilityBreakdown> {
    let rec = point
        .recovered
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("allocation has not been recovered".into()))?;
    let rates = build_rate_table(scenario, alpha)?;
    Ok(utility::report_utilities(&point.x, &rec.y, &rec.z, scenario, &rates, pricing))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterConfig {
    /// Stop once the squared change of the objective between rounds is at most this.
    pub xi1: f64,
    pub max_rounds: usize,
    /// Initial split, one entry per InP (a single entry applies to all).
    pub alpha_init: Vec<f64>,
    pub admm: AdmmConfig,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            xi1: 1e8,
            max_rounds: 50,
            alpha_init: vec![0.5],
            admm: AdmmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterTermination {
    Converged,
    /// The split did not move, so a further round would repeat the last one.
    Stationary,
    RoundCap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterRow {
    pub round: usize,
    pub alpha: Vec<f64>,
    pub objective: f64,
    /// Whether the ADMM allocation of this round replaced the previous one.
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct OuterReport {
    pub alpha: Vec<f64>,
    pub point: AllocationPoint,
    pub objective: f64,
    pub utilities: UtilityBreakdown,
    pub history: Vec<OuterRow>,
    pub rounds: Vec<SolveReport>,
    pub termination: OuterTermination,
}

impl OuterReport {
    pub fn write_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# fdvrm outer-trace v1")?;
        let mut w = csv::Writer::from_writer(out);
        let m = self.alpha.len();
        let mut header = vec!["round".to_string()];
        header.extend((1..=m).map(|i| format!("alpha_{i}")));
        header.push("objective".into());
        w.write_record(&header)?;
        for row in &self.history {
            let mut rec = vec![row.round.to_string()];
            rec.extend(row.alpha.iter().map(|a| format!("{a:e}")));
            rec.push(format!("{:e}", row.objective));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn expand_alpha(init: &[f64], m: usize) -> Result<Vec<f64>> {
    let alpha = match init.len() {
        1 => vec![init[0]; m],
        n if n == m => init.to_vec(),
        n => return Err(Error::InvalidArgument(format!("alpha_init has {n} entries for {m} InPs"))),
    };
    if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument("alpha_init entries must lie in [0, 1]".into()));
    }
    Ok(alpha)
}

/// Alternates ADMM at fixed split with the per-InP split update. A round
/// keeps the previous allocation when it beats the new ADMM allocation at
/// the current split, so the objective never decreases between rounds.
pub fn run_algorithm2(scenario: &Scenario, scheme: Scheme, cfg: &OuterConfig) -> Result<OuterReport> {
    if !(cfg.xi1 > 0.0) || cfg.max_rounds == 0 {
        return Err(Error::InvalidArgument("xi1 and the round cap must be positive".into()));
    }
    let m_count = scenario.num_inps();
    let mut alpha = expand_alpha(&cfg.alpha_init, m_count)?;
    let mut history = Vec::new();
    let mut rounds = Vec::new();
    let mut current: Option<(AllocationPoint, f64)> = None;
    let mut termination = OuterTermination::RoundCap;
    for round in 1..=cfg.max_rounds {
        let problem = RelaxedProblem::new(scenario, &alpha, scheme)?;
        let report = run_admm(&problem, &cfg.admm)?;
        let fresh = objective_at(&report.point, scenario, &alpha, scheme.pricing)?.total_vrm;
        let kept = match &current {
            Some((prev, _)) => {
                let old = objective_at(prev, scenario, &alpha, scheme.pricing)?.total_vrm;
                (old > fresh).then(|| prev.clone())
            }
            None => None,
        };
        let accepted = kept.is_none();
        let point = kept.unwrap_or_else(|| report.point.clone());
        rounds.push(report);
        let rec = point.recovered.as_ref().expect("recovered");
        let next: Vec<f64> = (0..m_count)
            .map(|m| solve_alpha(m, &point.x, &rec.y, &rec.z, scenario, scheme.pricing, alpha[m]))
            .collect::<Result<_>>()?;
        let objective = objective_at(&point, scenario, &next, scheme.pricing)?.total_vrm;
        history.push(OuterRow { round, alpha: next.clone(), objective, accepted });
        let moved = next.iter().zip(&alpha).any(|(a, b)| (a - b).abs() > 1e-12);
        let previous = current.as_ref().map(|(_, g)| *g);
        alpha = next;
        current = Some((point, objective));
        if !moved {
            termination = OuterTermination::Stationary;
            break;
        }
        if let Some(g) = previous {
            if (objective - g).powi(2) <= cfg.xi1 {
                termination = OuterTermination::Converged;
                break;
            }
        }
    }
    let (point, _) = current.expect("at least one round");
    let utilities = objective_at(&point, scenario, &alpha, scheme.pricing)?;
    let mut point = point;
    point.ytilde = &point.x * &point.recovered.as_ref().unwrap().y;
    Ok(OuterReport {
        objective: utilities.total_vrm,
        alpha,
        point,
        utilities,
        history,
        rounds,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioConfig};

    fn one_user_on(col: usize, y: f64) -> (Scenario, Array2<f64>, Array2<f64>, Vec<f64>) {
        let s = generate_scenario(&ScenarioConfig {
            num_inps: 1,
            num_mvnos: 1,
            users_per_mvno: 1,
            sbs_per_inp: 1,
            rng_seed: 3,
            ..ScenarioConfig::default()
        })
        .unwrap();
        let mut x = Array2::zeros((1, 2));
        x[[0, col]] = 1.0;
        let yy = &x * y;
        let rates = build_rate_table(&s, &[0.5]).unwrap();
        let mut z = vec![0.0; 2];
        if col == 1 {
            z[1] = y * rates.access[[0, 1]] / rates.backhaul[1];
        }
        (s, x, yy, z)
    }

    fn grid_best(s: &Scenario, x: &Array2<f64>, y: &Array2<f64>, z: &[f64]) -> f64 {
        let point = AllocationPoint {
            x: x.clone(),
            ytilde: x * y,
            recovered: Some(crate::relaxed::Recovered { y: y.clone(), z: z.to_vec() }),
        };
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=1000 {
            let a = k as f64 / 1000.0;
            let v = objective_at(&point, s, &[a], BackhaulPricing::SelfBackhaul).unwrap().total_vrm;
            if v > best.0 {
                best = (v, a);
            }
        }
        best.1
    }

    #[test]
    fn macro_user_with_cheap_spectrum_takes_whole_band() {
        let (s, x, y, z) = one_user_on(0, 1e-9);
        let a = solve_alpha(0, &x, &y, &z, &s, BackhaulPricing::SelfBackhaul, 0.5).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn matches_dense_grid() {
        for (col, y) in [(0, 1e-3), (0, 0.3), (1, 0.2), (1, 1.0)] {
            let (s, x, yy, z) = one_user_on(col, y);
            let a = solve_alpha(0, &x, &yy, &z, &s, BackhaulPricing::SelfBackhaul, 0.5).unwrap();
            let g = grid_best(&s, &x, &yy, &z);
            assert!((a - g).abs() <= 1e-3 + 1e-9, "col {col} y {y}: {a} vs grid {g}");
        }
    }

    #[test]
    fn idle_inp_keeps_split() {
        let (s, _, _, _) = one_user_on(0, 0.5);
        let x = Array2::zeros((1, 2));
        let a = solve_alpha(0, &x, &x, &[0.0, 0.0], &s, BackhaulPricing::SelfBackhaul, 0.37).unwrap();
        assert_eq!(a, 0.37);
    }

    #[test]
    fn empty_network_stops_after_one_round() {
        let s = generate_scenario(&ScenarioConfig { users_per_mvno: 0, ..ScenarioConfig::default() }).unwrap();
        let r = run_algorithm2(&s, Scheme::default(), &OuterConfig::default()).unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.alpha, vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_alpha_init() {
        let s = generate_scenario(&ScenarioConfig { users_per_mvno: 0, ..ScenarioConfig::default() }).unwrap();
        let cfg = OuterConfig { alpha_init: vec![0.1, 0.2, 0.3], ..OuterConfig::default() };
        assert!(run_algorithm2(&s, Scheme::default(), &cfg).is_err());
        let cfg = OuterConfig { alpha_init: vec![1.5], ..OuterConfig::default() };
        assert!(run_algorithm2(&s, Scheme::default(), &cfg).is_err());
    }
}
