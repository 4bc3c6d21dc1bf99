//! Utility and cost functions for users, MVNOs, InPs and the virtual
//! resource manager.
//!
//! Rates are in bit/s; the fairness utility uses the natural logarithm of a
//! rate. Bandwidth-power products use total transmit power in watts.

use std::io::Write;

use ndarray::Array2;

use crate::error::Result;
use crate::rates::RateTable;
use crate::scenario::{BsId, Scenario};

/// How MVNOs pay for moving small-cell traffic from the macro cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackhaulPricing {
    /// Full-duplex self-backhaul: price per bit `(1 - alpha) * P * z`, so the
    /// cost of a small cell is `(1 - alpha) * P * load^2 / R_bh`. No
    /// infrastructure cost for the InP.
    #[default]
    SelfBackhaul,
    /// Leased backhaul at the full-slot price `(1 - alpha) * P` per bit; the
    /// InP passes all backhaul income on to the infrastructure owner.
    External,
}

/// `x * ln(ytilde * rate / x)`, extended by continuity to 0 at `x = 0`.
/// Returns `-inf` when `x > 0` but the user receives nothing.
pub fn fairness_term(x: f64, ytilde: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if ytilde <= 0.0 || rate <= 0.0 {
        return f64::NEG_INFINITY;
    }
    x * (ytilde * rate / x).ln()
}

/// Bandwidth-power product consumed by a set of macro shares and small-cell
/// shares of one InP. Small-cell resources are discounted by `weight`.
pub fn resource_cost(
    macro_shares: &[f64],
    small_shares: &[f64],
    alpha: f64,
    bandwidth: f64,
    macro_power: f64,
    sbs_power: f64,
    weight: f64,
) -> f64 {
    let macro_sum: f64 = macro_shares.iter().sum();
    let small_sum: f64 = small_shares.iter().sum();
    macro_sum * alpha * bandwidth * macro_power + weight * small_sum * (1.0 - alpha) * bandwidth * sbs_power
}

/// Backhaul cost of one small cell carrying `load` bit/s over a link of
/// capacity `backhaul_rate`. Infinite when traffic is routed through a cell
/// without backhaul.
pub fn backhaul_cost(load: f64, backhaul_rate: f64, alpha: f64, macro_power: f64, pricing: BackhaulPricing) -> f64 {
    if load <= 0.0 {
        return 0.0;
    }
    if backhaul_rate <= 0.0 {
        return f64::INFINITY;
    }
    match pricing {
        BackhaulPricing::SelfBackhaul => (1.0 - alpha) * macro_power * load * load / backhaul_rate,
        BackhaulPricing::External => (1.0 - alpha) * macro_power * load,
    }
}

/// Price per unit of time share at a base station: `gamma * alpha * B * P` for
/// the macro cell and `gamma * w * (1 - alpha) * B * P_s` for small cells.
pub fn unit_resource_price(scenario: &Scenario, bs: BsId, alpha: f64) -> f64 {
    let m = bs.inp;
    let bw = scenario.bandwidth(m);
    let gamma = scenario.price(m);
    if bs.is_macro() {
        gamma * alpha * bw * scenario.macro_power_w(m)
    } else {
        gamma * scenario.sbs_weight(m) * (1.0 - alpha) * bw * scenario.sbs_power_w(m)
    }
}

/// Objective of the relaxed association problem at fixed spectrum split,
/// evaluated directly from `(x, ytilde)`.
pub fn vrm_objective(
    x: &Array2<f64>,
    ytilde: &Array2<f64>,
    scenario: &Scenario,
    rates: &RateTable,
    pricing: BackhaulPricing,
) -> f64 {
    (0..scenario.num_inps())
        .map(|m| inp_objective(m, x, ytilde, scenario, rates, pricing))
        .sum()
}

/// The part of [`vrm_objective`] that depends on InP `m`'s columns only.
pub fn inp_objective(
    m: usize,
    x: &Array2<f64>,
    ytilde: &Array2<f64>,
    scenario: &Scenario,
    rates: &RateTable,
    pricing: BackhaulPricing,
) -> f64 {
    let alpha = rates.alpha[m];
    let mut total = 0.0;
    for slot in 0..scenario.bs_per_inp() {
        let bs = BsId { inp: m, slot };
        let c = scenario.col(bs);
        let price = unit_resource_price(scenario, bs, alpha);
        let mut load = 0.0;
        for u in 0..scenario.num_users() {
            let (xu, yu) = (x[[u, c]], ytilde[[u, c]]);
            let r = rates.access[[u, c]];
            total += scenario.payment(u) * fairness_term(xu, yu, r) - price * yu;
            load += yu * r;
        }
        if !bs.is_macro() {
            total -= backhaul_cost(load, rates.backhaul[c], alpha, scenario.macro_power_w(m), pricing);
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserUtility {
    pub mvno: usize,
    /// Long-term rate `sum x * y * R`.
    pub rate: f64,
    /// `rate - payment`.
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MvnoUtility {
    /// `sum delta * x * ln(y R)`.
    pub income_fair: f64,
    /// `sum delta * x * y * R`.
    pub income_raw: f64,
    /// `sum_m gamma_m * T`.
    pub resource_cost: f64,
    pub backhaul_cost: f64,
    pub net_fair: f64,
    pub net_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InpUtility {
    pub resource_revenue: f64,
    pub backhaul_revenue: f64,
    pub infrastructure_cost: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UtilityBreakdown {
    pub users: Vec<UserUtility>,
    pub mvnos: Vec<MvnoUtility>,
    pub inps: Vec<InpUtility>,
    /// Total fairness-adjusted MVNO utility.
    pub total_vrm: f64,
}

impl UtilityBreakdown {
    pub fn average_user_utility(&self) -> f64 {
        if self.users.is_empty() {
            0.0
        } else {
            self.users.iter().map(|u| u.utility).sum::<f64>() / self.users.len() as f64
        }
    }

    pub fn total_inp_utility(&self) -> f64 {
        self.inps.iter().map(|i| i.utility).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# fdvrm utilities v1")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "entity",
            "id",
            "rate",
            "income_fair",
            "income_raw",
            "resource_cost",
            "backhaul_cost",
            "utility",
        ])?;
        let f = |v: f64| format!("{v:e}");
        for (u, row) in self.users.iter().enumerate() {
            w.write_record(["user".into(), u.to_string(), f(row.rate), "".into(), "".into(), "".into(), "".into(), f(row.utility)])?;
        }
        for (i, row) in self.mvnos.iter().enumerate() {
            w.write_record([
                "mvno".into(),
                i.to_string(),
                "".into(),
                f(row.income_fair),
                f(row.income_raw),
                f(row.resource_cost),
                f(row.backhaul_cost),
                f(row.net_fair),
            ])?;
        }
        for (m, row) in self.inps.iter().enumerate() {
            w.write_record([
                "inp".into(),
                m.to_string(),
                "".into(),
                f(row.resource_revenue),
                f(row.backhaul_revenue),
                "".into(),
                f(row.infrastructure_cost),
                f(row.utility),
            ])?;
        }
        w.write_record(["total".into(), "vrm".into(), "".into(), "".into(), "".into(), "".into(), "".into(), f(self.total_vrm)])?;
        w.flush()?;
        Ok(())
    }
}

/// Utilities of a recovered allocation given by association `x`, resource
/// shares `y` and backhaul slot shares `z` (indexed by base-station column).
pub fn report_utilities(
    x: &Array2<f64>,
    y: &Array2<f64>,
    z: &[f64],
    scenario: &Scenario,
    rates: &RateTable,
    pricing: BackhaulPricing,
) -> UtilityBreakdown {
    let users = scenario.num_users();
    let mut out = UtilityBreakdown {
        users: Vec::with_capacity(users),
        mvnos: vec![MvnoUtility::default(); scenario.config.num_mvnos],
        inps: vec![InpUtility::default(); scenario.num_inps()],
        total_vrm: 0.0,
    };
    for u in 0..users {
        let rate: f64 = (0..scenario.num_bs()).map(|c| x[[u, c]] * y[[u, c]] * rates.access[[u, c]]).sum();
        out.users.push(UserUtility {
            mvno: scenario.mvno_of_user[u],
            rate,
            utility: rate - scenario.payment(u),
        });
    }
    for c in 0..scenario.num_bs() {
        let bs = scenario.bs(c);
        let m = bs.inp;
        let alpha = rates.alpha[m];
        let price = unit_resource_price(scenario, bs, alpha);
        let per_bit = match pricing {
            BackhaulPricing::SelfBackhaul => (1.0 - alpha) * scenario.macro_power_w(m) * z[c],
            BackhaulPricing::External => (1.0 - alpha) * scenario.macro_power_w(m),
        };
        for u in 0..users {
            let xu = x[[u, c]];
            if xu <= 0.0 {
                continue;
            }
            let i = scenario.mvno_of_user[u];
            let delta = scenario.payment(u);
            let r = rates.access[[u, c]];
            let carried = xu * y[[u, c]] * r;
            let mv = &mut out.mvnos[i];
            mv.income_fair += delta * xu * (y[[u, c]] * r).ln();
            mv.income_raw += delta * carried;
            let t_cost = price * xu * y[[u, c]];
            mv.resource_cost += t_cost;
            out.inps[m].resource_revenue += t_cost;
            if !bs.is_macro() {
                let q = per_bit * carried;
                mv.backhaul_cost += q;
                out.inps[m].backhaul_revenue += q;
            }
        }
    }
    for mv in out.mvnos.iter_mut() {
        mv.net_fair = mv.income_fair - mv.resource_cost - mv.backhaul_cost;
        mv.net_raw = mv.income_raw - mv.resource_cost - mv.backhaul_cost;
    }
    for inp in out.inps.iter_mut() {
        inp.infrastructure_cost = match pricing {
            BackhaulPricing::SelfBackhaul => 0.0,
            BackhaulPricing::External => inp.backhaul_revenue,
        };
        inp.utility = inp.resource_revenue + inp.backhaul_revenue - inp.infrastructure_cost;
    }
    out.total_vrm = out.mvnos.iter().map(|m| m.net_fair).sum();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn fairness_examples() {
        assert_eq!(fairness_term(0.0, 0.0, 123.0), 0.0);
        assert!((fairness_term(1.0, 1.0, E) - 1.0).abs() < 1e-15);
        assert_eq!(fairness_term(0.5, 0.25, 2.0), 0.0);
        assert_eq!(fairness_term(0.3, 0.0, 2.0), f64::NEG_INFINITY);
    }

    #[test]
    fn fairness_continuous_at_zero() {
        for &c in &[1e-3, 0.1, 0.5, 1.0] {
            let mut prev = f64::INFINITY;
            for k in 1..12 {
                let x = 10f64.powi(-k);
                let v = fairness_term(x, x * c, 1e7).abs();
                assert!(v < prev);
                prev = v;
            }
            assert!(prev < 1e-9);
        }
    }

    #[test]
    fn resource_cost_examples() {
        assert_eq!(resource_cost(&[0.0], &[0.0, 0.0], 0.5, 10e6, 40.0, 0.1, 1.0), 0.0);
        let t = resource_cost(&[1.0], &[], 0.5, 10e6, 40.0, 0.1, 1e-3);
        assert!((t - 2e8).abs() < 1e-6);
        let discounted = resource_cost(&[], &[0.3, 0.2], 0.5, 10e6, 40.0, 0.1, 1e-3);
        let full = resource_cost(&[], &[0.3, 0.2], 0.5, 10e6, 40.0, 0.1, 1.0);
        assert!((discounted / full - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn backhaul_cost_examples() {
        let pricing = BackhaulPricing::SelfBackhaul;
        assert_eq!(backhaul_cost(0.0, 1e7, 0.5, 40.0, pricing), 0.0);
        let r_bh = 3e7;
        let q = backhaul_cost(r_bh, r_bh, 0.4, 40.0, pricing);
        assert!((q - 0.6 * 40.0 * r_bh).abs() < 1e-6 * q);
        let q1 = backhaul_cost(1e6, r_bh, 0.4, 40.0, pricing);
        let q2 = backhaul_cost(2e6, r_bh, 0.4, 40.0, pricing);
        assert!((q2 / q1 - 4.0).abs() < 1e-12);
        assert_eq!(backhaul_cost(1.0, 0.0, 0.4, 40.0, pricing), f64::INFINITY);
        // leased backhaul is never cheaper than self-backhaul within capacity
        for &load in &[0.0, 1e5, 1e7, r_bh] {
            assert!(
                backhaul_cost(load, r_bh, 0.4, 40.0, BackhaulPricing::External)
                    >= backhaul_cost(load, r_bh, 0.4, 40.0, pricing)
            );
        }
    }
}
