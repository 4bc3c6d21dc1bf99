//! Exhaustive reference solver for tiny instances.
//!
//! Every binary association is enumerated. For each base station and each
//! set of users it could serve, the resource shares are found by a grid
//! search followed by a pattern-search polish; the spectrum split is searched
//! on a grid per InP. Backhaul slots follow from tightness. The objective is
//! evaluated here directly from rates, prices and powers.
//!
//! Only instances with at most one small cell per InP are supported, which
//! makes the per-InP backhaul slot budget coincide with the per-link limit
//! and lets base stations be optimized independently.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rates::build_rate_table;
use crate::relaxed::{AllocationPoint, Recovered, Scheme};
use crate::scenario::{BsId, Scenario};
use crate::utility::BackhaulPricing;

pub const WORK_LIMIT: f64 = 1e9;

#[derive(Debug, Clone, PartialEq)]
pub enum AlphaGrid {
    /// Split held fixed (one entry per InP, or one for all).
    Fixed(Vec<f64>),
    /// `{0, 1/n, ..., 1}`.
    Steps(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleGrid {
    /// Shares are searched on multiples of `1 / y_steps` before polishing.
    pub y_steps: usize,
    pub alpha: AlphaGrid,
}

impl Default for OracleGrid {
    fn default() -> Self {
        OracleGrid { y_steps: 64, alpha: AlphaGrid::Steps(128) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub association: Array2<f64>,
    pub y: Array2<f64>,
    pub z: Vec<f64>,
    pub alpha: Vec<f64>,
    pub objective: f64,
    /// Number of associations enumerated.
    pub enumerated: u64,
}

impl OracleResult {
    pub fn point(&self) -> AllocationPoint {
        AllocationPoint {
            x: self.association.clone(),
            ytilde: &self.association * &self.y,
            recovered: Some(Recovered { y: self.y.clone(), z: self.z.clone() }),
        }
    }

    pub fn write_csv<W: Write>(&self, scenario: &Scenario, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# fdvrm oracle v1")?;
        writeln!(out, "# objective {:e} enumerated {}", self.objective, self.enumerated)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user", "inp", "bs", "x", "y", "z", "alpha"])?;
        for u in 0..self.association.nrows() {
            for c in 0..self.association.ncols() {
                if self.association[[u, c]] == 0.0 {
                    continue;
                }
                let bs = scenario.bs(c);
                w.write_record([
                    u.to_string(),
                    bs.inp.to_string(),
                    bs.slot.to_string(),
                    format!("{:e}", self.association[[u, c]]),
                    format!("{:e}", self.y[[u, c]]),
                    format!("{:e}", self.z[c]),
                    format!("{:e}", self.alpha[bs.inp]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One base station at one split: users it may serve and its prices.
struct CellCase {
    payment: Vec<f64>,
    rates: Vec<f64>,
    /// Price per unit share.
    price: f64,
    /// `(backhaul rate, (1 - alpha) * P)`; `None` for macro cells.
    backhaul: Option<(f64, f64)>,
    pricing: BackhaulPricing,
}

impl CellCase {
    fn load(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.rates).map(|(y, r)| y * r).sum()
    }

    fn feasible(&self, y: &[f64]) -> bool {
        if y.iter().any(|&v| !(v > 0.0 && v <= 1.0)) || y.iter().sum::<f64>() > 1.0 {
            return false;
        }
        match self.backhaul {
            Some((bh, _)) => self.load(y) <= bh,
            None => true,
        }
    }

    fn value(&self, y: &[f64]) -> f64 {
        let mut v = 0.0;
        for ((&yu, &r), &d) in y.iter().zip(&self.rates).zip(&self.payment) {
            v += d * (yu * r).ln() - self.price * yu;
        }
        if let Some((bh, per_bit)) = self.backhaul {
            let s = self.load(y);
            // slot share at tightness: z = s / bh
            v -= match self.pricing {
                BackhaulPricing::SelfBackhaul => per_bit * (s / bh) * s,
                BackhaulPricing::External => per_bit * s,
            };
        }
        v
    }

    fn grid_search(&self, steps: usize) -> Option<Vec<f64>> {
        let n = self.rates.len();
        let mut k = vec![0usize; n];
        let mut best: Option<(f64, Vec<f64>)> = None;
        fn rec(cell: &CellCase, steps: usize, i: usize, used: usize, k: &mut Vec<usize>, best: &mut Option<(f64, Vec<f64>)>) {
            if i == k.len() {
                let y: Vec<f64> = k.iter().map(|&v| v as f64 / steps as f64).collect();
                if cell.feasible(&y) {
                    let v = cell.value(&y);
                    if best.as_ref().is_none_or(|(b, _)| v > *b) {
                        *best = Some((v, y));
                    }
                }
                return;
            }
            let remaining = k.len() - i - 1;
            for v in 1..=steps.saturating_sub(used + remaining) {
                k[i] = v;
                rec(cell, steps, i + 1, used + v, k, best);
            }
        }
        rec(self, steps, 0, 0, &mut k, &mut best);
        best.map(|(_, y)| y)
    }

    fn directions(&self) -> Vec<Vec<f64>> {
        let n = self.rates.len();
        let mut dirs = Vec::new();
        let mut push = |mut d: Vec<f64>| {
            let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale > 0.0 {
                d.iter_mut().for_each(|v| *v /= scale);
                dirs.push(d);
            }
        };
        for i in 0..n {
            let mut d = vec![0.0; n];
            d[i] = 1.0;
            push(d);
        }
        for i in 0..n {
            for j in i + 1..n {
                let mut d = vec![0.0; n];
                d[i] = 1.0;
                d[j] = -1.0;
                push(d);
                let mut d = vec![0.0; n];
                d[i] = 1.0 / self.rates[i];
                d[j] = -1.0 / self.rates[j];
                push(d);
                for k in j + 1..n {
                    // keeps both the share sum and the backhaul load fixed
                    let (ri, rj, rk) = (self.rates[i], self.rates[j], self.rates[k]);
                    let mut d = vec![0.0; n];
                    d[i] = rk - rj;
                    d[j] = ri - rk;
                    d[k] = rj - ri;
                    push(d);
                }
            }
        }
        dirs
    }

    fn polish(&self, mut y: Vec<f64>, initial_step: f64) -> Vec<f64> {
        let dirs = self.directions();
        let mut best = self.value(&y);
        let mut h = initial_step;
        let mut trial = y.clone();
        while h > 1e-14 {
            let mut improved = false;
            for d in &dirs {
                for sign in [1.0, -1.0] {
                    for ((t, &yv), &dv) in trial.iter_mut().zip(&y).zip(d) {
                        *t = yv + sign * h * dv;
                    }
                    if self.feasible(&trial) {
                        let v = self.value(&trial);
                        if v > best {
                            best = v;
                            y.copy_from_slice(&trial);
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                h *= 0.5;
            }
        }
        y
    }

    /// Best value and shares; an empty user set is worth zero.
    fn optimize(&self, steps: usize) -> (f64, Vec<f64>) {
        let n = self.rates.len();
        if n == 0 {
            return (0.0, Vec::new());
        }
        let start = self.grid_search(steps).unwrap_or_else(|| {
            // grid too coarse for the backhaul limit: start well inside it
            let bh = self.backhaul.map_or(f64::INFINITY, |(b, _)| b);
            self.rates.iter().map(|r| (0.5 / n as f64).min(0.5 * bh / (n as f64 * r))).collect()
        });
        let y = self.polish(start, 1.0 / steps as f64);
        (self.value(&y), y)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Maximizes the original objective by enumeration. See the module docs for
/// the supported instance shape.
pub fn brute_force(scenario: &Scenario, scheme: Scheme, grid: &OracleGrid) -> Result<OracleResult> {
    let m_count = scenario.num_inps();
    let users = scenario.num_users();
    let cols = scenario.num_bs();
    if scenario.sbs_per_inp() > 1 {
        return Err(Error::OracleShape(scenario.sbs_per_inp()));
    }
    if grid.y_steps == 0 || users > 16 {
        return Err(Error::InvalidArgument("oracle needs y_steps > 0 and at most 16 users".into()));
    }
    // split candidates per InP, indexed [m][k]
    let alphas: Vec<Vec<f64>> = match &grid.alpha {
        AlphaGrid::Fixed(v) if v.len() == 1 => vec![v.clone(); m_count],
        AlphaGrid::Fixed(v) if v.len() == m_count => v.iter().map(|&a| vec![a]).collect(),
        AlphaGrid::Fixed(v) => {
            return Err(Error::InvalidArgument(format!("{} split values for {m_count} InPs", v.len())))
        }
        AlphaGrid::Steps(0) => return Err(Error::InvalidArgument("alpha grid needs at least one step".into())),
        AlphaGrid::Steps(n) => vec![(0..=*n).map(|k| k as f64 / *n as f64).collect(); m_count],
    };
    if alphas.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument("split values must lie in [0, 1]".into()));
    }
    let n_alpha = alphas[0].len();

    // candidate sets, from the rates at each split
    let tables: Vec<_> = (0..n_alpha)
        .map(|k| {
            let a: Vec<f64> = (0..m_count).map(|m| alphas[m][k]).collect();
            build_rate_table(scenario, &a)
        })
        .collect::<Result<_>>()?;
    let allowed = |u: usize, c: usize| {
        let bs = scenario.bs(c);
        scheme.virtualization || bs.inp == scenario.home_inp(scenario.mvno_of_user[u])
    };
    let serves = |k: usize, u: usize, c: usize| {
        let t = &tables[k];
        allowed(u, c) && t.access[[u, c]] > 0.0 && (scenario.bs(c).is_macro() || t.backhaul[c] > 0.0)
    };
    // a user may pick any base station it can reach at some split
    let choices: Vec<Vec<usize>> = (0..users)
        .map(|u| (0..cols).filter(|&c| (0..n_alpha).any(|k| serves(k, u, c))).collect())
        .collect();

    let mut work = 0.0;
    for c in 0..cols {
        let n = (0..users).filter(|&u| choices[u].contains(&c)).count();
        work += (1..=n).map(|s| binomial(n, s) * binomial(grid.y_steps, s)).sum::<f64>();
    }
    work *= n_alpha as f64;
    if work > WORK_LIMIT {
        return Err(Error::OracleTooLarge { work, limit: WORK_LIMIT });
    }

    // best value per (split index, column, user mask)
    let masks = 1usize << users;
    let cell_table: Vec<Vec<Vec<Option<(f64, Vec<f64>)>>>> = (0..n_alpha)
        .into_par_iter()
        .map(|k| {
            (0..cols)
                .map(|c| {
                    let bs = scenario.bs(c);
                    let m = bs.inp;
                    let a = alphas[m][k];
                    let reach: usize = (0..users).filter(|&u| choices[u].contains(&c)).map(|u| 1 << u).sum();
                    (0..masks)
                        .map(|mask| {
                            if mask & !reach != 0 {
                                return None;
                            }
                            let members: Vec<usize> = (0..users).filter(|u| mask >> u & 1 == 1).collect();
                            if members.iter().any(|&u| !serves(k, u, c)) {
                                return Some((f64::NEG_INFINITY, Vec::new()));
                            }
                            let cell = cell_case(scenario, scheme.pricing, &tables[k], bs, a, &members);
                            Some(cell.optimize(grid.y_steps))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let active: Vec<usize> = (0..users).filter(|&u| !choices[u].is_empty()).collect();
    let mut pick = vec![0usize; active.len()];
    let mut best: Option<(f64, Vec<usize>, Vec<usize>)> = None;
    let mut enumerated = 0u64;
    loop {
        enumerated += 1;
        let mut col_mask = vec![0usize; cols];
        for (i, &u) in active.iter().enumerate() {
            col_mask[choices[u][pick[i]]] |= 1 << u;
        }
        let mut total = 0.0;
        let mut split = vec![0usize; m_count];
        for (m, s) in split.iter_mut().enumerate() {
            let range = scenario.col(BsId { inp: m, slot: 0 })..scenario.col(BsId { inp: m, slot: 0 }) + scenario.bs_per_inp();
            let mut inp_best = (f64::NEG_INFINITY, 0);
            for k in 0..n_alpha {
                let v: f64 = range.clone().map(|c| cell_table[k][c][col_mask[c]].as_ref().unwrap().0).sum();
                if v > inp_best.0 {
                    inp_best = (v, k);
                }
            }
            total += inp_best.0;
            *s = inp_best.1;
        }
        if best.as_ref().is_none_or(|(b, _, _)| total > *b) {
            best = Some((total, col_mask.clone(), split));
        }
        // odometer over the users' choices
        let mut i = 0;
        while i < active.len() {
            pick[i] += 1;
            if pick[i] < choices[active[i]].len() {
                break;
            }
            pick[i] = 0;
            i += 1;
        }
        if i == active.len() {
            break;
        }
    }

    let (objective, col_mask, split) = best.expect("at least one association");
    let mut association = Array2::zeros((users, cols));
    let mut y = Array2::zeros((users, cols));
    let mut z = vec![0.0; cols];
    let alpha: Vec<f64> = (0..m_count).map(|m| alphas[m][split[m]]).collect();
    for c in 0..cols {
        let k = split[scenario.bs(c).inp];
        let (_, shares) = cell_table[k][c][col_mask[c]].as_ref().unwrap();
        let members = (0..users).filter(|u| col_mask[c] >> u & 1 == 1);
        let mut load = 0.0;
        for (u, &share) in members.zip(shares) {
            association[[u, c]] = 1.0;
            y[[u, c]] = share;
            load += share * tables[k].access[[u, c]];
        }
        if !scenario.bs(c).is_macro() && load > 0.0 {
            z[c] = load / tables[k].backhaul[c];
        }
    }
    Ok(OracleResult { association, y, z, alpha, objective, enumerated })
}

fn cell_case(
    scenario: &Scenario,
    pricing: BackhaulPricing,
    table: &crate::rates::RateTable,
    bs: BsId,
    alpha: f64,
    members: &[usize],
) -> CellCase {
    let m = bs.inp;
    let c = scenario.col(bs);
    let bw = scenario.bandwidth(m);
    let gamma = scenario.price(m);
    let (price, backhaul) = if bs.is_macro() {
        (gamma * alpha * bw * scenario.macro_power_w(m), None)
    } else {
        (
            gamma * scenario.sbs_weight(m) * (1.0 - alpha) * bw * scenario.sbs_power_w(m),
            Some((table.backhaul[c], (1.0 - alpha) * scenario.macro_power_w(m))),
        )
    };
    CellCase {
        payment: members.iter().map(|&u| scenario.payment(u)).collect(),
        rates: members.iter().map(|&u| table.access[[u, c]]).collect(),
        price,
        backhaul,
        pricing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioConfig};

    fn tiny(users_per_mvno: usize, sbs: usize, seed: u64) -> Scenario {
        generate_scenario(&ScenarioConfig {
            num_inps: 1,
            num_mvnos: 1,
            users_per_mvno,
            sbs_per_inp: sbs,
            area_side_m: 400.0,
            rng_seed: seed,
            ..ScenarioConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn single_macro_user_matches_first_order_condition() {
        let s = tiny(1, 0, 5);
        let grid = OracleGrid { y_steps: 64, alpha: AlphaGrid::Fixed(vec![0.5]) };
        let r = brute_force(&s, Scheme::default(), &grid).unwrap();
        let expected = (1e6 / (5.0 * 0.5 * 10e6 * s.macro_power_w(0))).min(1.0);
        assert!((r.y[[0, 0]] - expected).abs() <= 1.0 / 64.0);
        assert!((r.y[[0, 0]] - expected).abs() <= 1e-6 * expected);
        assert_eq!(r.enumerated, 1);
    }

    #[test]
    fn shape_and_size_guards() {
        let s = tiny(1, 2, 1);
        assert!(matches!(brute_force(&s, Scheme::default(), &OracleGrid::default()), Err(Error::OracleShape(2))));
        let s = tiny(6, 1, 1);
        assert!(matches!(
            brute_force(&s, Scheme::default(), &OracleGrid::default()),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn empty_instance_is_worth_zero() {
        let s = tiny(0, 1, 1);
        let r = brute_force(&s, Scheme::default(), &OracleGrid { y_steps: 8, alpha: AlphaGrid::Steps(4) }).unwrap();
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn pattern_search_reaches_constrained_optimum() {
        // two users sharing one unit of time: equal payments give the
        // optimum y_i = 1/2 when the price is negligible
        let cell = CellCase {
            payment: vec![1.0, 1.0],
            rates: vec![3.0, 7.0],
            price: 1e-9,
            backhaul: None,
            pricing: BackhaulPricing::SelfBackhaul,
        };
        let (_, y) = cell.optimize(7);
        assert!((y[0] - 0.5).abs() < 1e-7 && (y[1] - 0.5).abs() < 1e-7, "{y:?}");
    }

    #[test]
    fn backhaul_limited_cell_is_tight() {
        // loose time budget, tight link: sum y r = bh at the optimum
        let cell = CellCase {
            payment: vec![1.0, 2.0, 1.5],
            rates: vec![3.0, 5.0, 4.0],
            price: 0.0,
            backhaul: Some((1.0, 0.0)),
            pricing: BackhaulPricing::SelfBackhaul,
        };
        let (_, y) = cell.optimize(16);
        let load = cell.load(&y);
        assert!((load - 1.0).abs() < 1e-9);
        // weighted log: y_i r_i proportional to payment
        let total: f64 = cell.payment.iter().sum();
        for i in 0..3 {
            assert!((y[i] * cell.rates[i] - cell.payment[i] / total).abs() < 1e-7, "{y:?}");
        }
    }
}
