//! `fdvrm` command line: scenario generation, single solves, sweeps and
//! oracle checks. Every output is CSV with a `# fdvrm <kind> v1` first line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fdvrm::alpha::OuterTermination;
use fdvrm::harness::{self, CompareSpec, ExperimentSpec, Metrics, SolverSettings};
use fdvrm::utility::BackhaulPricing;
use fdvrm::{
    brute_force, build_rate_table, generate_scenario, run_admm, run_algorithm2, AlphaGrid, OracleGrid, RelaxedProblem,
    Scenario, ScenarioConfig, Scheme,
};

#[derive(Parser)]
#[command(name = "fdvrm", version, about = "Virtual resource allocation for full-duplex self-backhauled small cells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario TOML; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if needed.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct Solver {
    #[arg(long)]
    rho: Option<f64>,
    /// Outer-loop threshold on the squared objective change.
    #[arg(long)]
    xi1: Option<f64>,
    /// ADMM threshold on step length and consensus gap.
    #[arg(long)]
    xi2: Option<f64>,
    #[arg(long)]
    alpha_init: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    max_rounds: Option<usize>,
    /// Solve once at the initial split instead of running the outer loop.
    #[arg(long)]
    fixed_alpha: bool,
}

impl Solver {
    fn apply(&self, s: &mut SolverSettings) {
        if let Some(v) = self.rho {
            s.rho = v;
        }
        if let Some(v) = self.xi1 {
            s.xi1 = v;
        }
        if let Some(v) = self.xi2 {
            s.xi2 = v;
        }
        if let Some(v) = self.alpha_init {
            s.alpha_init = v;
        }
        if let Some(v) = self.max_iter {
            s.max_iter = v;
        }
        if let Some(v) = self.max_rounds {
            s.max_rounds = v;
        }
        if self.fixed_alpha {
            s.optimize_alpha = false;
        }
    }

    fn settings(&self) -> SolverSettings {
        let mut s = SolverSettings::default();
        self.apply(&mut s);
        s
    }
}

#[derive(Args, Clone, Copy, Default)]
struct Ablation {
    /// Users may only attach to their MVNO's home InP.
    #[arg(long)]
    no_virtualization: bool,
    /// Price backhaul as an external link instead of full-duplex self-backhaul.
    #[arg(long)]
    no_fd: bool,
}

impl Ablation {
    fn scheme(self) -> Scheme {
        Scheme {
            virtualization: !self.no_virtualization,
            pricing: if self.no_fd { BackhaulPricing::External } else { BackhaulPricing::SelfBackhaul },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes the resolved scenario and its channel gains.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Also write the rate table at the initial split.
        #[arg(long)]
        dump_rates: bool,
        #[arg(long, default_value_t = 0.5)]
        alpha_init: f64,
    },
    /// Solves one scenario.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solver: Solver,
        #[command(flatten)]
        ablation: Ablation,
        /// Also write the rate table at the final split.
        #[arg(long)]
        dump_rates: bool,
    },
    /// Runs a parameter sweep from a preset or an experiment TOML.
    Sweep {
        /// users, si, rho, alpha-init or w.
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        preset: Option<String>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        solver: Solver,
        /// Comma-separated schemes (virt+fd, virt, fd, baseline).
        #[arg(long, value_delimiter = ',')]
        schemes: Option<Vec<String>>,
    },
    /// Exhaustive search on a tiny scenario.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: Ablation,
        /// Fixed split; searched on a grid when absent.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 64)]
        y_steps: usize,
        /// Grid `{0, 1/n, ..., 1}` for the split.
        #[arg(long, default_value_t = 128)]
        alpha_steps: usize,
    },
    /// Relaxed, oracle and recovered objectives on desk scenarios.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: Ablation,
        /// Seeds 0..n (or just `--seed`).
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 64)]
        y_steps: usize,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        xi2: Option<f64>,
    },
}

fn load_scenario_config(common: &Common, base: ScenarioConfig) -> Result<ScenarioConfig> {
    let mut cfg = match &common.config {
        Some(path) => ScenarioConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => base,
    };
    if let Some(seed) = common.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    println!("{}", path.display());
    Ok(BufWriter::new(f))
}

fn write_summary(out: &Path, metrics: &Metrics, alpha: &[f64], rounds: usize, iterations: usize, status: &str) -> Result<()> {
    let mut w = create(out, "summary.csv")?;
    writeln!(w, "# fdvrm summary v1")?;
    writeln!(w, "metric,value")?;
    writeln!(w, "total_mvno_utility,{:e}", metrics.total_mvno_utility)?;
    writeln!(w, "average_user_utility,{:e}", metrics.average_user_utility)?;
    writeln!(w, "total_inp_utility,{:e}", metrics.total_inp_utility)?;
    writeln!(w, "utilization,{:e}", metrics.utilization)?;
    writeln!(w, "sbs_user_fraction,{:e}", metrics.sbs_user_fraction)?;
    for (m, a) in alpha.iter().enumerate() {
        writeln!(w, "alpha_{},{a:e}", m + 1)?;
    }
    writeln!(w, "rounds,{rounds}")?;
    writeln!(w, "admm_iterations,{iterations}")?;
    writeln!(w, "status,{status}")?;
    w.flush()?;
    Ok(())
}

fn dump_rates(scenario: &Scenario, alpha: &[f64], out: &Path) -> Result<()> {
    let rates = build_rate_table(scenario, alpha)?;
    rates.write_csv(scenario, create(out, "rates.csv")?)?;
    Ok(())
}

fn generate(common: &Common, rates: bool, alpha: f64) -> Result<()> {
    let cfg = load_scenario_config(common, ScenarioConfig::default())?;
    let scenario = generate_scenario(&cfg)?;
    let mut w = create(&common.out, "scenario.toml")?;
    w.write_all(cfg.to_toml_string()?.as_bytes())?;
    w.flush()?;
    scenario.write_gains_csv(create(&common.out, "gains.csv")?)?;
    if rates {
        dump_rates(&scenario, &vec![alpha; scenario.num_inps()], &common.out)?;
    }
    Ok(())
}

fn solve(common: &Common, solver: &Solver, ablation: Ablation, rates: bool) -> Result<()> {
    let cfg = load_scenario_config(common, ScenarioConfig::default())?;
    let scenario = generate_scenario(&cfg)?;
    let settings = solver.settings();
    let scheme = ablation.scheme();
    let out = &common.out;
    let (alpha, point, utilities, rounds, iterations, status) = if settings.optimize_alpha {
        let r = run_algorithm2(&scenario, scheme, &settings.outer())?;
        r.write_history_csv(create(out, "outer_trace.csv")?)?;
        let last = r.rounds.last().expect("one round");
        last.write_trace_csv(create(out, "admm_trace.csv")?)?;
        let status = match r.termination {
            OuterTermination::Converged => "converged",
            OuterTermination::Stationary => "stationary",
            OuterTermination::RoundCap => "round_cap",
        };
        (r.alpha.clone(), r.point, r.utilities, r.history.len(), last.iterations, status)
    } else {
        let alpha = vec![settings.alpha_init; scenario.num_inps()];
        let problem = RelaxedProblem::new(&scenario, &alpha, scheme)?;
        let r = run_admm(&problem, &settings.admm())?;
        r.write_trace_csv(create(out, "admm_trace.csv")?)?;
        let status = match r.termination {
            fdvrm::Termination::Converged => "converged",
            fdvrm::Termination::IterationCap => "iteration_cap",
        };
        (alpha, r.point, r.utilities, 1, r.iterations, status)
    };
    point.write_csv(&scenario, create(out, "allocation.csv")?)?;
    utilities.write_csv(create(out, "utilities.csv")?)?;
    let metrics = Metrics::of(&scenario, &point, &utilities);
    write_summary(out, &metrics, &alpha, rounds, iterations, status)?;
    if rates {
        dump_rates(&scenario, &alpha, out)?;
    }
    Ok(())
}

fn sweep(
    preset: Option<&str>,
    spec_path: Option<&Path>,
    common: &Common,
    solver: &Solver,
    schemes: Option<&[String]>,
) -> Result<()> {
    let mut spec = match (preset, spec_path) {
        (Some(name), _) => ExperimentSpec::preset(name)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentSpec::from_toml_str(&text)?
        }
        (None, None) => bail!("either --preset or --spec is required"),
    };
    if let Some(path) = &common.config {
        spec.scenario = ScenarioConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    }
    if let Some(seed) = common.seed {
        spec.seeds = vec![seed];
    }
    if let Some(s) = schemes {
        spec.schemes = s.to_vec();
    }
    solver.apply(&mut spec.solver);
    spec.validate()?;
    let rows = harness::run_experiment(&spec)?;
    harness::write_experiment_csv(&spec, &rows, create(&common.out, &format!("{}.csv", spec.id))?)?;
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; see the error column", rows.len());
    }
    Ok(())
}

fn oracle(common: &Common, ablation: Ablation, alpha: Option<f64>, y_steps: usize, alpha_steps: usize) -> Result<()> {
    let desk = CompareSpec::default().scenario;
    let cfg = load_scenario_config(common, desk)?;
    let scenario = generate_scenario(&cfg)?;
    let grid = OracleGrid {
        y_steps,
        alpha: match alpha {
            Some(a) => AlphaGrid::Fixed(vec![a]),
            None => AlphaGrid::Steps(alpha_steps),
        },
    };
    let result = brute_force(&scenario, ablation.scheme(), &grid)?;
    result.write_csv(&scenario, create(&common.out, "oracle.csv")?)?;
    Ok(())
}

fn compare(
    common: &Common,
    ablation: Ablation,
    seeds: u64,
    alpha: f64,
    y_steps: usize,
    rho: Option<f64>,
    xi2: Option<f64>,
) -> Result<()> {
    let mut spec = CompareSpec::default();
    if let Some(path) = &common.config {
        spec.scenario = ScenarioConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    }
    spec.seeds = match common.seed {
        Some(s) => vec![s],
        None => (0..seeds).collect(),
    };
    spec.alpha = alpha;
    spec.y_steps = y_steps;
    spec.scheme = ablation.scheme();
    if let Some(v) = rho {
        spec.admm.rho = v;
    }
    if let Some(v) = xi2 {
        spec.admm.xi2 = v;
    }
    let rows = harness::compare_with_oracle(&spec)?;
    harness::write_gap_csv(&rows, create(&common.out, "oracle_gap.csv")?)?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate { common, dump_rates, alpha_init } => generate(common, *dump_rates, *alpha_init),
        Command::Solve { common, solver, ablation, dump_rates } => solve(common, solver, *ablation, *dump_rates),
        Command::Sweep { preset, spec, common, solver, schemes } => {
            sweep(preset.as_deref(), spec.as_deref(), common, solver, schemes.as_deref())
        }
        Command::Oracle { common, ablation, alpha, y_steps, alpha_steps } => {
            oracle(common, *ablation, *alpha, *y_steps, *alpha_steps)
        }
        Command::Compare { common, ablation, seeds, alpha, y_steps, rho, xi2 } => {
            compare(common, *ablation, *seeds, *alpha, *y_steps, *rho, *xi2)
        }
    }
}
