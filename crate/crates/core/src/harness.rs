//! Experiment driver: parameter sweeps over seeds and schemes, ablations and
//! oracle comparisons, all written as CSV.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{run_admm, solve_centralized, AdmmConfig};
use crate::alpha::{run_algorithm2, OuterConfig};
use crate::error::{Error, Result};
use crate::oracle::{brute_force, AlphaGrid, OracleGrid};
use crate::relaxed::{AllocationPoint, RelaxedProblem, Scheme};
use crate::scenario::{generate_scenario, PerInp, Scenario, ScenarioConfig};
use crate::utility::{BackhaulPricing, UtilityBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Total number of users, split evenly over MVNOs.
    Users,
    /// Residual self-interference gain, dB.
    SiDb,
    Rho,
    /// Small-cell price discount.
    SbsWeight,
    AlphaInit,
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepVariable::Users => "users",
            SweepVariable::SiDb => "si_db",
            SweepVariable::Rho => "rho",
            SweepVariable::SbsWeight => "sbs_weight",
            SweepVariable::AlphaInit => "alpha_init",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (virtualization, fd) = match s {
            "virt+fd" => (true, true),
            "virt" => (true, false),
            "fd" => (false, true),
            "baseline" => (false, false),
            _ => return Err(Error::InvalidArgument(format!("unknown scheme '{s}' (virt+fd, virt, fd, baseline)"))),
        };
        Ok(Scheme {
            virtualization,
            pricing: if fd { BackhaulPricing::SelfBackhaul } else { BackhaulPricing::External },
        })
    }
}

pub const ALL_SCHEMES: [&str; 4] = ["virt+fd", "virt", "fd", "baseline"];

/// Solver settings shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Run the outer split loop; otherwise solve once at `alpha_init`.
    pub optimize_alpha: bool,
    pub alpha_init: f64,
    pub rho: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub max_iter: usize,
    pub max_rounds: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let admm = AdmmConfig::default();
        let outer = OuterConfig::default();
        SolverSettings {
            optimize_alpha: true,
            alpha_init: 0.5,
            rho: admm.rho,
            xi1: outer.xi1,
            xi2: admm.xi2,
            max_iter: admm.max_iter,
            max_rounds: outer.max_rounds,
        }
    }
}

impl SolverSettings {
    pub fn admm(&self) -> AdmmConfig {
        AdmmConfig {
            rho: self.rho,
            xi2: self.xi2,
            max_iter: self.max_iter,
            ..AdmmConfig::default()
        }
    }

    pub fn outer(&self) -> OuterConfig {
        OuterConfig {
            xi1: self.xi1,
            max_rounds: self.max_rounds,
            alpha_init: vec![self.alpha_init],
            admm: self.admm(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: String,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    pub sweep: SweepVariable,
    pub values: Vec<f64>,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub solver: SolverSettings,
}

fn default_schemes() -> Vec<String> {
    vec!["virt+fd".into()]
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one value".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("experiment needs at least one seed".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("seeds must be distinct".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::InvalidConfig("experiment needs at least one scheme".into()));
        }
        for s in &self.schemes {
            s.parse::<Scheme>()?;
        }
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::InvalidConfig(format!("experiment id '{}' must be a plain file stem", self.id)));
        }
        self.scenario.validate()
    }

    /// Built-in experiments, one per experiment family.
    pub fn preset(name: &str) -> Result<Self> {
        let base = ScenarioConfig::default();
        let seeds = vec![1, 2, 3];
        let schemes: Vec<String> = ALL_SCHEMES.iter().map(|s| s.to_string()).collect();
        let spec = match name {
            "users" => ExperimentSpec {
                id: "users".into(),
                scenario: base,
                sweep: SweepVariable::Users,
                values: vec![10.0, 20.0, 30.0, 40.0],
                schemes,
                seeds,
                solver: SolverSettings::default(),
            },
            "si" => ExperimentSpec {
                id: "si".into(),
                scenario: base,
                sweep: SweepVariable::SiDb,
                values: (0..10).map(|k| -100.0 + 10.0 * k as f64).collect(),
                schemes: vec!["virt+fd".into()],
                seeds,
                solver: SolverSettings::default(),
            },
            "rho" => ExperimentSpec {
                id: "rho".into(),
                scenario: base,
                sweep: SweepVariable::Rho,
                values: vec![5e7, 8e7],
                schemes: vec!["virt+fd".into()],
                seeds: vec![1],
                solver: SolverSettings { optimize_alpha: false, ..SolverSettings::default() },
            },
            "alpha-init" => ExperimentSpec {
                id: "alpha-init".into(),
                scenario: base,
                sweep: SweepVariable::AlphaInit,
                values: vec![0.1, 0.3, 0.5, 0.7, 0.9],
                schemes: vec!["virt+fd".into()],
                seeds: vec![1],
                solver: SolverSettings::default(),
            },
            "w" => ExperimentSpec {
                id: "w".into(),
                scenario: base,
                sweep: SweepVariable::SbsWeight,
                values: vec![1e-3, 1.0],
                schemes: vec!["virt+fd".into()],
                seeds: vec![1],
                solver: SolverSettings::default(),
            },
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset '{name}' (users, si, rho, alpha-init, w)"
                )))
            }
        };
        Ok(spec)
    }
}

/// Scenario and solver settings for one sweep point.
pub fn apply_sweep(
    base: &ScenarioConfig,
    solver: &SolverSettings,
    variable: SweepVariable,
    value: f64,
    seed: u64,
) -> Result<(ScenarioConfig, SolverSettings)> {
    let mut cfg = base.clone();
    let mut solver = solver.clone();
    cfg.rng_seed = seed;
    match variable {
        SweepVariable::Users => {
            let total = value.round();
            if total < 0.0 || (total as usize) % cfg.num_mvnos != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{value} users cannot be split evenly over {} MVNOs",
                    cfg.num_mvnos
                )));
            }
            cfg.users_per_mvno = total as usize / cfg.num_mvnos;
        }
        SweepVariable::SiDb => cfg.residual_si_db = PerInp::uniform(value),
        SweepVariable::Rho => solver.rho = value,
        SweepVariable::SbsWeight => cfg.sbs_weight = PerInp::uniform(value),
        SweepVariable::AlphaInit => solver.alpha_init = value,
    }
    cfg.validate()?;
    Ok((cfg, solver))
}

/// Headline numbers of one solved allocation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub total_mvno_utility: f64,
    pub average_user_utility: f64,
    pub total_inp_utility: f64,
    /// Allocated time share summed over base stations, per base station.
    pub utilization: f64,
    /// Fraction of associated users served by small cells.
    pub sbs_user_fraction: f64,
}

impl Metrics {
    pub fn of(scenario: &Scenario, point: &AllocationPoint, utilities: &UtilityBreakdown) -> Self {
        let mut on_sbs = 0usize;
        let mut associated = 0usize;
        for u in 0..point.x.nrows() {
            for c in 0..point.x.ncols() {
                if point.x[[u, c]] > 0.5 {
                    associated += 1;
                    if !scenario.bs(c).is_macro() {
                        on_sbs += 1;
                    }
                }
            }
        }
        let bs = scenario.num_bs().max(1) as f64;
        Metrics {
            total_mvno_utility: utilities.total_vrm,
            average_user_utility: utilities.average_user_utility(),
            total_inp_utility: utilities.total_inp_utility(),
            utilization: point.ytilde.sum() / bs,
            sbs_user_fraction: if associated == 0 { 0.0 } else { on_sbs as f64 / associated as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub metrics: Metrics,
    pub alpha: Vec<f64>,
    pub rounds: usize,
    /// ADMM iterations of the last round.
    pub admm_iterations: usize,
    /// First ADMM iteration of the last round whose consensus gap met `xi2`.
    pub consensus_iteration: Option<usize>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub value: f64,
    pub seed: u64,
    pub scheme: String,
    pub outcome: std::result::Result<RunOutcome, String>,
}

/// Solves one scenario with one scheme.
pub fn run_single(cfg: &ScenarioConfig, scheme: Scheme, solver: &SolverSettings) -> Result<RunOutcome> {
    let scenario = generate_scenario(cfg)?;
    if solver.optimize_alpha {
        let r = run_algorithm2(&scenario, scheme, &solver.outer())?;
        let last = r.rounds.last().expect("one round");
        Ok(RunOutcome {
            metrics: Metrics::of(&scenario, &r.point, &r.utilities),
            alpha: r.alpha.clone(),
            rounds: r.history.len(),
            admm_iterations: last.iterations,
            consensus_iteration: last.consensus_iteration(solver.xi2),
            converged: r.termination != crate::alpha::OuterTermination::RoundCap,
        })
    } else {
        let alpha = vec![solver.alpha_init; scenario.num_inps()];
        let problem = RelaxedProblem::new(&scenario, &alpha, scheme)?;
        let r = run_admm(&problem, &solver.admm())?;
        Ok(RunOutcome {
            metrics: Metrics::of(&scenario, &r.point, &r.utilities),
            alpha,
            rounds: 1,
            admm_iterations: r.iterations,
            consensus_iteration: r.consensus_iteration(solver.xi2),
            converged: r.termination == crate::admm::Termination::Converged,
        })
    }
}

/// Runs every (value, seed, scheme) combination in parallel; rows come back
/// in sweep order, then seed, then scheme.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ExperimentRow>> {
    spec.validate()?;
    let mut jobs = Vec::new();
    for &value in &spec.values {
        for &seed in &spec.seeds {
            for scheme in &spec.schemes {
                jobs.push((value, seed, scheme.clone()));
            }
        }
    }
    let rows = jobs
        .into_par_iter()
        .map(|(value, seed, scheme)| {
            let outcome = apply_sweep(&spec.scenario, &spec.solver, spec.sweep, value, seed)
                .and_then(|(cfg, solver)| run_single(&cfg, scheme.parse()?, &solver))
                .map_err(|e| e.to_string());
            ExperimentRow { value, seed, scheme, outcome }
        })
        .collect();
    Ok(rows)
}

pub fn write_experiment_csv<W: Write>(spec: &ExperimentSpec, rows: &[ExperimentRow], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# fdvrm experiment v1")?;
    let mut w = csv::Writer::from_writer(out);
    let m = spec.scenario.num_inps;
    let mut header: Vec<String> = [
        spec.sweep.to_string().as_str(),
        "seed",
        "scheme",
        "total_mvno_utility",
        "average_user_utility",
        "total_inp_utility",
        "utilization",
        "sbs_user_fraction",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=m).map(|i| format!("alpha_{i}")));
    header.extend(["rounds", "admm_iterations", "consensus_iteration", "converged", "error"].map(String::from));
    w.write_record(&header)?;
    let f = |v: f64| format!("{v:e}");
    for row in rows {
        let mut rec = vec![f(row.value), row.seed.to_string(), row.scheme.clone()];
        match &row.outcome {
            Ok(o) => {
                let mt = &o.metrics;
                rec.extend([
                    f(mt.total_mvno_utility),
                    f(mt.average_user_utility),
                    f(mt.total_inp_utility),
                    f(mt.utilization),
                    f(mt.sbs_user_fraction),
                ]);
                rec.extend(o.alpha.iter().map(|&a| f(a)));
                rec.extend([
                    o.rounds.to_string(),
                    o.admm_iterations.to_string(),
                    o.consensus_iteration.map_or(String::new(), |i| i.to_string()),
                    o.converged.to_string(),
                    String::new(),
                ]);
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 5 + m + 4));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows where a restricted scheme beat the full scheme on the same sweep
/// value and seed. Ablations only remove options or raise costs, so every
/// entry signals a solver shortfall.
pub fn dominance_violations(rows: &[ExperimentRow], full: &str, tolerance: f64) -> Vec<(f64, u64, String, f64)> {
    let mut out = Vec::new();
    for row in rows.iter().filter(|r| r.scheme != full) {
        let Ok(o) = &row.outcome else { continue };
        let reference = rows
            .iter()
            .find(|r| r.scheme == full && r.seed == row.seed && r.value == row.value)
            .and_then(|r| r.outcome.as_ref().ok());
        if let Some(reference) = reference {
            let excess = o.metrics.total_mvno_utility - reference.metrics.total_mvno_utility;
            if excess > tolerance * reference.metrics.total_mvno_utility.abs() {
                out.push((row.value, row.seed, row.scheme.clone(), excess));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSpec {
    pub scenario: ScenarioConfig,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    pub scheme: Scheme,
    pub y_steps: usize,
    pub admm: AdmmConfig,
}

impl Default for CompareSpec {
    fn default() -> Self {
        CompareSpec {
            scenario: ScenarioConfig {
                sbs_per_inp: 1,
                users_per_mvno: 2,
                ..ScenarioConfig::default()
            },
            seeds: (0..20).collect(),
            alpha: 0.5,
            scheme: Scheme::default(),
            y_steps: 64,
            admm: AdmmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapRow {
    pub seed: u64,
    /// Optimum of the relaxed problem (centralized solve).
    pub relaxed: f64,
    pub oracle: f64,
    /// ADMM solution after rounding and resource recovery.
    pub recovered: f64,
}

impl GapRow {
    pub fn recovery_gap(&self) -> f64 {
        if self.oracle == 0.0 {
            0.0
        } else {
            (self.oracle - self.recovered) / self.oracle.abs()
        }
    }
}

/// Relaxed, oracle and recovered objectives at a fixed split, per seed.
pub fn compare_with_oracle(spec: &CompareSpec) -> Result<Vec<GapRow>> {
    spec.seeds
        .par_iter()
        .map(|&seed| {
            let cfg = ScenarioConfig { rng_seed: seed, ..spec.scenario.clone() };
            let scenario = generate_scenario(&cfg)?;
            let alpha = vec![spec.alpha; scenario.num_inps()];
            let problem = RelaxedProblem::new(&scenario, &alpha, spec.scheme)?;
            let relaxed = solve_centralized(&problem)?.relaxed_objective;
            let recovered = run_admm(&problem, &spec.admm)?.objective;
            let grid = OracleGrid { y_steps: spec.y_steps, alpha: AlphaGrid::Fixed(alpha) };
            let oracle = brute_force(&scenario, spec.scheme, &grid)?.objective;
            Ok(GapRow { seed, relaxed, oracle, recovered })
        })
        .collect()
}

pub fn write_gap_csv<W: Write>(rows: &[GapRow], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# fdvrm oracle-gap v1")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "relaxed", "oracle", "recovered", "recovery_gap"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            format!("{:e}", r.relaxed),
            format!("{:e}", r.oracle),
            format!("{:e}", r.recovered),
            format!("{:e}", r.recovery_gap()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_labels_round_trip() {
        for label in ALL_SCHEMES {
            let s: Scheme = label.parse().unwrap();
            assert_eq!(s.label(), label);
        }
        assert!("full".parse::<Scheme>().is_err());
    }

    #[test]
    fn presets_are_valid() {
        for name in ["users", "si", "rho", "alpha-init", "w"] {
            ExperimentSpec::preset(name).unwrap().validate().unwrap();
        }
        assert!(ExperimentSpec::preset("fig11").is_err());
    }

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::preset("si").unwrap();
        spec.seeds = vec![4, 4];
        assert!(spec.validate().is_err());
        spec.seeds = vec![];
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::preset("si").unwrap();
        spec.values.clear();
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::preset("si").unwrap();
        spec.id = "../x".into();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_from_toml() {
        let spec = ExperimentSpec::from_toml_str(
            r#"
            id = "tiny"
            sweep = "si_db"
            values = [-100, -50]
            seeds = [7]
            schemes = ["virt+fd", "baseline"]
            [scenario]
            users_per_mvno = 3
            residual_si_db = [-90, -80]
            [solver]
            optimize_alpha = false
            "#,
        )
        .unwrap();
        assert_eq!(spec.sweep, SweepVariable::SiDb);
        assert_eq!(spec.scenario.users_per_mvno, 3);
        assert!(!spec.solver.optimize_alpha);
        assert!(ExperimentSpec::from_toml_str("id = \"x\"\nsweep = \"colour\"\nvalues = [1]\nseeds = [1]").is_err());
    }

    #[test]
    fn sweep_application() {
        let base = ScenarioConfig::default();
        let solver = SolverSettings::default();
        let (cfg, _) = apply_sweep(&base, &solver, SweepVariable::Users, 30.0, 9).unwrap();
        assert_eq!((cfg.users_per_mvno, cfg.rng_seed), (15, 9));
        assert!(apply_sweep(&base, &solver, SweepVariable::Users, 31.0, 9).is_err());
        let (cfg, _) = apply_sweep(&base, &solver, SweepVariable::SiDb, -40.0, 1).unwrap();
        assert_eq!(cfg.residual_si_db.get(1), -40.0);
        let (_, s) = apply_sweep(&base, &solver, SweepVariable::Rho, 8e7, 1).unwrap();
        assert_eq!(s.rho, 8e7);
        let (_, s) = apply_sweep(&base, &solver, SweepVariable::AlphaInit, 0.9, 1).unwrap();
        assert_eq!(s.alpha_init, 0.9);
        assert!(apply_sweep(&base, &solver, SweepVariable::SbsWeight, 2.0, 1).is_err());
    }

    #[test]
    fn empty_instance_compares_as_zeros() {
        let spec = CompareSpec {
            scenario: ScenarioConfig { users_per_mvno: 0, sbs_per_inp: 1, ..ScenarioConfig::default() },
            seeds: vec![1],
            ..CompareSpec::default()
        };
        let rows = compare_with_oracle(&spec).unwrap();
        assert_eq!((rows[0].relaxed, rows[0].oracle, rows[0].recovered), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_cell_has_no_rounding_gap() {
        let spec = CompareSpec {
            scenario: ScenarioConfig {
                num_inps: 1,
                num_mvnos: 1,
                users_per_mvno: 3,
                sbs_per_inp: 0,
                ..ScenarioConfig::default()
            },
            seeds: vec![2, 3],
            ..CompareSpec::default()
        };
        for r in compare_with_oracle(&spec).unwrap() {
            assert!((r.relaxed - r.recovered).abs() <= 1e-9 * r.relaxed.abs());
            assert!((r.oracle - r.recovered).abs() <= 1e-6 * r.relaxed.abs());
        }
    }
}
