//! Achievable downlink rates (bit/s) for macro access, small-cell access and
//! full-duplex self-backhaul links.

use std::io::Write;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scenario::{BsId, Scenario};

/// Macro access rate: the macro band `alpha * B` carries an interference-free link.
pub fn macro_access_rate(alpha: f64, bandwidth: f64, psd: f64, gain: f64, noise_psd: f64) -> f64 {
    alpha * bandwidth * (1.0 + psd * gain / noise_psd).log2()
}

/// Small-cell access rate on the remaining `(1 - alpha) * B`, interfered by the
/// other small cells of the same InP.
pub fn small_access_rate(
    alpha: f64,
    bandwidth: f64,
    sbs_psd: f64,
    gain: f64,
    cochannel_gains: &[f64],
    noise_psd: f64,
) -> f64 {
    let interference: f64 = cochannel_gains.iter().map(|g| sbs_psd * g).sum();
    (1.0 - alpha) * bandwidth * (1.0 + sbs_psd * gain / (interference + noise_psd)).log2()
}

/// Backhaul rate from the macro cell to a small cell that is simultaneously
/// transmitting: residual self-interference `si_gain * sbs_psd` plus
/// cross-interference from the other small cells.
#[allow(clippy::too_many_arguments)]
pub fn backhaul_rate(
    alpha: f64,
    bandwidth: f64,
    macro_psd: f64,
    gain: f64,
    si_gain: f64,
    sbs_psd: f64,
    cross_gains: &[f64],
    noise_psd: f64,
) -> f64 {
    let cross: f64 = cross_gains.iter().map(|g| sbs_psd * g).sum();
    (1.0 - alpha) * bandwidth * (1.0 + macro_psd * gain / (si_gain * sbs_psd + cross + noise_psd)).log2()
}

/// All link rates of a scenario at a given spectrum split.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub alpha: Vec<f64>,
    /// Access rate of each user to each base station, `U x K`.
    pub access: Array2<f64>,
    /// Backhaul rate per base-station column; zero for macro columns.
    pub backhaul: Vec<f64>,
}

impl RateTable {
    pub fn access_rate(&self, user: usize, col: usize) -> f64 {
        self.access[[user, col]]
    }

    pub fn backhaul_rate(&self, col: usize) -> f64 {
        self.backhaul[col]
    }

    pub fn write_csv<W: Write>(&self, scenario: &Scenario, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# fdvrm rates v1")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user", "inp", "bs", "rate"])?;
        for u in 0..self.access.nrows() {
            for c in 0..self.access.ncols() {
                let bs = scenario.bs(c);
                w.write_record([
                    u.to_string(),
                    bs.inp.to_string(),
                    bs.slot.to_string(),
                    format!("{:e}", self.access[[u, c]]),
                ])?;
            }
        }
        for c in 0..self.backhaul.len() {
            let bs = scenario.bs(c);
            if !bs.is_macro() {
                w.write_record([
                    "backhaul".to_string(),
                    bs.inp.to_string(),
                    bs.slot.to_string(),
                    format!("{:e}", self.backhaul[c]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn build_rate_table(scenario: &Scenario, alpha: &[f64]) -> Result<RateTable> {
    let m_count = scenario.num_inps();
    if alpha.len() != m_count {
        return Err(Error::InvalidArgument(format!(
            "alpha has {} entries, expected {m_count}",
            alpha.len()
        )));
    }
    if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument("alpha entries must lie in [0, 1]".into()));
    }
    let s_count = scenario.sbs_per_inp();
    let users = scenario.num_users();
    let noise = scenario.noise_psd();
    let mut access = Array2::zeros((users, scenario.num_bs()));
    let mut backhaul = vec![0.0; scenario.num_bs()];
    let mut others = Vec::with_capacity(s_count);
    for m in 0..m_count {
        let a = alpha[m];
        let bw = scenario.bandwidth(m);
        let p_macro = scenario.macro_psd(m);
        let p_sbs = scenario.sbs_psd(m);
        let macro_col = scenario.col(BsId { inp: m, slot: 0 });
        for u in 0..users {
            access[[u, macro_col]] =
                macro_access_rate(a, bw, p_macro, scenario.access_gain[[u, macro_col]], noise);
            for j in 0..s_count {
                others.clear();
                others.extend(
                    (0..s_count)
                        .filter(|&k| k != j)
                        .map(|k| scenario.access_gain[[u, macro_col + k + 1]]),
                );
                access[[u, macro_col + j + 1]] = small_access_rate(
                    a,
                    bw,
                    p_sbs,
                    scenario.access_gain[[u, macro_col + j + 1]],
                    &others,
                    noise,
                );
            }
        }
        let si = scenario.residual_si(m);
        for j in 0..s_count {
            others.clear();
            others.extend(
                (0..s_count)
                    .filter(|&k| k != j)
                    .map(|k| scenario.sbs_cross_gain[m][[j, k]]),
            );
            backhaul[macro_col + j + 1] = backhaul_rate(
                a,
                bw,
                p_macro,
                scenario.backhaul_gain[[m, j]],
                si,
                p_sbs,
                &others,
                noise,
            );
        }
    }
    Ok(RateTable {
        alpha: alpha.to_vec(),
        access,
        backhaul,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioConfig};

    const B: f64 = 10e6;

    #[test]
    fn macro_examples() {
        assert!((macro_access_rate(0.5, B, 1.0, 1.0, 1.0) - 5e6).abs() < 1e-6);
        assert_eq!(macro_access_rate(0.0, B, 1.0, 1e6, 1.0), 0.0);
        assert!((macro_access_rate(1.0, B, 15.0, 1.0, 1.0) - 40e6).abs() < 1e-6);
    }

    #[test]
    fn small_cell_examples() {
        assert!((small_access_rate(0.5, B, 1.0, 1.0, &[], 1.0) - 5e6).abs() < 1e-6);
        let r = small_access_rate(0.5, B, 1.0, 1.0, &[1.0], 1e-30);
        assert!((r - 0.5 * B).abs() < 1e-3);
        assert_eq!(small_access_rate(1.0, B, 1.0, 1.0, &[0.3], 1.0), 0.0);
    }

    #[test]
    fn backhaul_examples() {
        let no_si = backhaul_rate(0.3, B, 2.0, 1.5, 0.0, 1.0, &[], 1.0);
        assert!((no_si - macro_access_rate(0.7, B, 2.0, 1.5, 1.0)).abs() < 1e-6);
        // si * P_s = noise and P h / noise = 2 gives SINR 1
        let r = backhaul_rate(0.25, B, 2.0, 1.0, 1.0, 1.0, &[], 1.0);
        assert!((r - 0.75 * B).abs() < 1e-6);
        let lo = backhaul_rate(0.5, B, 2.0, 1.0, 1e-3, 1.0, &[0.01], 1e-3);
        let hi = backhaul_rate(0.5, B, 2.0, 1.0, 1e-1, 1.0, &[0.01], 1e-3);
        assert!(hi < lo);
    }

    #[test]
    fn backhaul_monotone_in_si() {
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let si = 1e-12 * 10f64.powf(k as f64 * 0.25);
            let r = backhaul_rate(0.4, B, 4e-6, 1e-9, si, 1e-8, &[1e-10, 2e-10], 4e-21);
            assert!(r < prev);
            prev = r;
        }
    }

    #[test]
    fn spectrum_additivity() {
        let a = macro_access_rate(0.2, B, 3.0, 0.7, 0.5);
        let b = macro_access_rate(0.35, B, 3.0, 0.7, 0.5);
        let ab = macro_access_rate(0.55, B, 3.0, 0.7, 0.5);
        assert!((a + b - ab).abs() < 1e-6);
    }

    fn small_scenario() -> Scenario {
        generate_scenario(&ScenarioConfig {
            users_per_mvno: 1,
            sbs_per_inp: 3,
            rng_seed: 4,
            ..ScenarioConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn table_extremes() {
        let s = small_scenario();
        let zero = build_rate_table(&s, &[0.0, 0.0]).unwrap();
        let one = build_rate_table(&s, &[1.0, 1.0]).unwrap();
        for c in 0..s.num_bs() {
            let bs = s.bs(c);
            for u in 0..s.num_users() {
                if bs.is_macro() {
                    assert_eq!(zero.access[[u, c]], 0.0);
                    assert!(one.access[[u, c]] > 0.0);
                } else {
                    assert!(zero.access[[u, c]] > 0.0);
                    assert_eq!(one.access[[u, c]], 0.0);
                }
            }
            if !bs.is_macro() {
                assert!(zero.backhaul[c] > 0.0);
                assert_eq!(one.backhaul[c], 0.0);
            }
        }
        assert!(build_rate_table(&s, &[0.5]).is_err());
        assert!(build_rate_table(&s, &[0.5, 1.5]).is_err());
    }

    #[test]
    fn table_matches_scalar_ops() {
        let s = small_scenario();
        let alpha = [0.3, 0.6];
        let t = build_rate_table(&s, &alpha).unwrap();
        let n = s.noise_psd();
        for u in 0..2 {
            for m in 0..2 {
                let base = m * 4;
                let g = |k: usize| s.access_gain[[u, base + k]];
                let macro_r = macro_access_rate(alpha[m], s.bandwidth(m), s.macro_psd(m), g(0), n);
                assert_eq!(t.access[[u, base]], macro_r);
                let r2 = small_access_rate(alpha[m], s.bandwidth(m), s.sbs_psd(m), g(2), &[g(1), g(3)], n);
                assert_eq!(t.access[[u, base + 2]], r2);
            }
        }
        let bh = backhaul_rate(
            0.6,
            s.bandwidth(1),
            s.macro_psd(1),
            s.backhaul_gain[[1, 0]],
            s.residual_si(1),
            s.sbs_psd(1),
            &[s.sbs_cross_gain[1][[0, 1]], s.sbs_cross_gain[1][[0, 2]]],
            n,
        );
        assert_eq!(t.backhaul[5], bh);
        assert_eq!(t.backhaul[4], 0.0);
    }

    #[test]
    fn rate_zero_iff_no_spectrum() {
        let s = small_scenario();
        for &a in &[0.0, 0.25, 1.0] {
            let t = build_rate_table(&s, &[a, a]).unwrap();
            for c in 0..s.num_bs() {
                let share = if s.bs(c).is_macro() { a } else { 1.0 - a };
                for u in 0..s.num_users() {
                    assert_eq!(t.access[[u, c]] == 0.0, share == 0.0);
                }
            }
        }
    }
}
