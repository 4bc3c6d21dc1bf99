//! Consensus ADMM over InPs for the relaxed association problem.
//!
//! Each InP keeps a full copy of the association matrix and optimizes it
//! against its own exact share allocation; the coordinator averages the
//! copies and updates the multipliers. Only association matrices and
//! multipliers cross the InP boundary.

use std::fmt;
use std::io::Write;

use ndarray::{s, Array2, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::relaxed::{AllocationPoint, InpModel, RelaxedProblem};
use crate::utility::{self, UtilityBreakdown};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    /// Stop once both the global step and the consensus gap fall below this.
    pub xi2: f64,
    pub max_iter: usize,
    /// Local solves stop when a projected step moves no entry by more than this.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 5e7,
            xi2: 1e-3,
            max_iter: 1000,
            inner_tol: 1e-6,
            inner_max_iter: 500,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.xi2 > 0.0) {
            return Err(Error::InvalidArgument(format!("xi2 must be positive, got {}", self.xi2)));
        }
        if !(self.inner_tol > 0.0) || self.inner_max_iter == 0 || self.max_iter == 0 {
            return Err(Error::InvalidArgument("inner tolerance and iteration caps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    IterationCap,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::IterationCap => "iteration cap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Relaxed objective at the global association.
    pub objective: f64,
    pub best_objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Largest entry-wise distance between a local copy and the global matrix.
    pub consensus_gap: f64,
    /// Global step `||X^{t+1} - X^t||_2`.
    pub step: f64,
    pub inner_warnings: usize,
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# fdvrm admm-trace v1")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iter",
        "objective",
        "best_objective",
        "primal_residual",
        "dual_residual",
        "consensus_gap",
    ])?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            format!("{:e}", r.objective),
            format!("{:e}", r.best_objective),
            format!("{:e}", r.primal_residual),
            format!("{:e}", r.dual_residual),
            format!("{:e}", r.consensus_gap),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    pub iteration: usize,
    pub local: Vec<Array2<f64>>,
    pub local_shares: Vec<Array2<f64>>,
    pub global: Array2<f64>,
    pub lambda: Vec<Array2<f64>>,
    pub rho: f64,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct LocalSolution {
    pub xz: Array2<f64>,
    /// Shares on this InP's own columns.
    pub ytilde: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Row-wise projection onto the simplex over `candidates`.
fn project_rows(x: &mut Array2<f64>, candidates: &Array2<bool>) {
    let cols = x.ncols();
    let mut buf = Vec::with_capacity(cols);
    for u in 0..x.nrows() {
        buf.clear();
        buf.extend((0..cols).filter(|&c| candidates[[u, c]]).map(|c| x[[u, c]]));
        if buf.is_empty() {
            x.row_mut(u).fill(0.0);
            continue;
        }
        crate::relaxed::project_simplex(&mut buf);
        let mut it = buf.iter();
        for c in 0..cols {
            x[[u, c]] = if candidates[[u, c]] { *it.next().unwrap() } else { 0.0 };
        }
    }
}

struct LocalObjective<'a> {
    model: &'a InpModel,
    global: &'a Array2<f64>,
    lambda: &'a Array2<f64>,
    rho: f64,
}

impl LocalObjective<'_> {
    fn own(&self) -> std::ops::Range<usize> {
        self.model.col_offset..self.model.col_offset + self.model.cells.len()
    }

    /// Value (minimization form), gradient and own-column shares.
    fn eval(&self, xz: &Array2<f64>, with_grad: bool) -> (f64, Option<Array2<f64>>, Array2<f64>) {
        let own = self.own();
        let resp = self.model.best_response(xz.slice(s![.., own.clone()]));
        let mut value = -resp.value;
        Zip::from(xz).and(self.global).and(self.lambda).for_each(|&z, &x, &l| {
            let d = z - x;
            value += l * d + 0.5 * self.rho * d * d;
        });
        let grad = with_grad.then(|| {
            let mut g = xz - self.global;
            g *= self.rho;
            g += self.lambda;
            let d = resp.marginals(self.model);
            for u in 0..xz.nrows() {
                for (k, c) in own.clone().enumerate() {
                    if d[[u, k]].is_finite() {
                        g[[u, c]] -= d[[u, k]];
                    }
                }
            }
            g
        });
        (value, grad, resp.ytilde)
    }
}

const STALL_REL: f64 = 1e-13;
const STALL_ROUNDS: usize = 25;

/// Projected steepest descent with backtracking on a smooth objective over
/// the candidate simplex. `eval` returns (value, gradient).
fn projected_descent<F>(
    start: Array2<f64>,
    candidates: &Array2<bool>,
    initial_step: f64,
    tol: f64,
    max_iter: usize,
    mut eval: F,
) -> (Array2<f64>, usize, bool)
where
    F: FnMut(&Array2<f64>, bool) -> (f64, Option<Array2<f64>>),
{
    let mut x = start;
    project_rows(&mut x, candidates);
    let (mut fx, g) = eval(&x, true);
    let mut g = g.unwrap();
    let mut step = initial_step;
    let mut stalled = 0;
    for it in 0..max_iter {
        let mut accepted = None;
        for _ in 0..80 {
            let mut trial = &x - &(&g * step);
            project_rows(&mut trial, candidates);
            let d = &trial - &x;
            let moved = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if moved == 0.0 {
                return (x, it, true);
            }
            let (ft, _) = eval(&trial, false);
            let model = fx + (&g * &d).sum() + d.iter().map(|v| v * v).sum::<f64>() / (2.0 * step);
            if ft <= model || ft <= fx && moved <= tol {
                accepted = Some((trial, ft, moved));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, ft, moved)) = accepted else {
            return (x, it, false);
        };
        x = trial;
        stalled = if fx - ft <= STALL_REL * fx.abs() { stalled + 1 } else { 0 };
        fx = ft;
        if moved <= tol || stalled >= STALL_ROUNDS {
            return (x, it + 1, true);
        }
        g = eval(&x, true).1.unwrap();
        step *= 2.0;
    }
    (x, max_iter, false)
}

/// InP `m`'s local step: minimizes `-V_m(Xz) + <lambda, Xz - X> + rho/2 ||Xz - X||^2`
/// over its local copy, starting from `warm`.
pub fn local_update(
    model: &InpModel,
    candidates: &Array2<bool>,
    global: &Array2<f64>,
    lambda: &Array2<f64>,
    rho: f64,
    warm: &Array2<f64>,
    cfg: &AdmmConfig,
) -> LocalSolution {
    let obj = LocalObjective { model, global, lambda, rho };
    let (xz, iterations, converged) = projected_descent(
        warm.clone(),
        candidates,
        1.0 / rho,
        cfg.inner_tol,
        cfg.inner_max_iter,
        |x, grad| {
            let (v, g, _) = obj.eval(x, grad);
            (v, g)
        },
    );
    let (_, _, ytilde) = obj.eval(&xz, false);
    LocalSolution { xz, ytilde, iterations, converged }
}

/// `X = mean(Xz) + sum(lambda) / (M rho)`.
pub fn global_update(local: &[Array2<f64>], lambda: &[Array2<f64>], rho: f64) -> Array2<f64> {
    let m = local.len() as f64;
    let mut x = Array2::zeros(local[0].raw_dim());
    for xz in local {
        x += xz;
    }
    x /= m;
    for l in lambda {
        x.scaled_add(1.0 / (m * rho), l);
    }
    x
}

/// `lambda += rho (Xz - X)`.
pub fn dual_update(lambda: &mut Array2<f64>, xz: &Array2<f64>, global: &Array2<f64>, rho: f64) {
    Zip::from(lambda).and(xz).and(global).for_each(|l, &z, &x| *l += rho * (z - x));
}

/// Stations each user may be rounded to, best first. The pool holds the
/// stations with the largest marginal benefit `marginal` (`dV/dx`) among
/// those the user already leans on (relaxed weight at least `SUPPORT`);
/// marginals within `TIE_TOL` (relative) of the best count as ties, as
/// they are equal at an exact optimum. If every marginal benefit is
/// negative the pool is the whole support. Order: larger relaxed weight,
/// then lower column.
pub fn rounding_pools(relaxed: &Array2<f64>, marginal: &Array2<f64>, candidates: &Array2<bool>) -> Vec<Vec<usize>> {
    const TIE_TOL: f64 = 1e-2;
    const SUPPORT: f64 = 1e-3;
    let (users, cols) = relaxed.dim();
    (0..users)
        .map(|u| {
            let mut cands: Vec<usize> = (0..cols).filter(|&c| candidates[[u, c]]).collect();
            if cands.iter().any(|&c| relaxed[[u, c]] >= SUPPORT) {
                cands.retain(|&c| relaxed[[u, c]] >= SUPPORT);
            }
            let best_d = cands.iter().map(|&c| marginal[[u, c]]).fold(f64::NEG_INFINITY, f64::max);
            if best_d >= 0.0 {
                let slack = TIE_TOL * best_d.abs().max(1.0);
                cands.retain(|&c| marginal[[u, c]] >= best_d - slack);
            }
            cands.sort_by(|&a, &b| relaxed[[u, b]].total_cmp(&relaxed[[u, a]]).then(a.cmp(&b)));
            cands
        })
        .collect()
}

/// Rounds a relaxed association to one base station per user. Users are
/// fixed in order of decreasing largest relaxed weight; a user with more
/// than one station in its pool (see [`rounding_pools`]) takes the one
/// that leaves the reduced objective highest, the others still fractional.
pub fn recover_association(problem: &RelaxedProblem<'_>, relaxed: &Array2<f64>) -> Array2<f64> {
    let candidates = &problem.candidates;
    let marginal = problem.evaluate_association(relaxed).marginal;
    let pools = rounding_pools(relaxed, &marginal, candidates);
    let mut order: Vec<usize> = (0..relaxed.nrows()).collect();
    let top = |u: usize| relaxed.row(u).iter().fold(0.0f64, |m, &v| m.max(v));
    order.sort_by(|&a, &b| top(b).total_cmp(&top(a)).then(a.cmp(&b)));
    let mut x = relaxed.clone();
    for u in order {
        let pool = &pools[u];
        if pool.is_empty() {
            x.row_mut(u).fill(0.0);
            continue;
        }
        let mut pick = pool[0];
        if pool.len() > 1 {
            let mut best = f64::NEG_INFINITY;
            for &c in pool {
                x.row_mut(u).fill(0.0);
                x[[u, c]] = 1.0;
                let v = problem.evaluate_association(&x).value;
                if v > best {
                    best = v;
                    pick = c;
                }
            }
        }
        x.row_mut(u).fill(0.0);
        x[[u, pick]] = 1.0;
    }
    x
}

/// Exact shares for a binary association, with `y = ytilde / x` and the
/// backhaul slots set so every backhaul constraint is tight.
pub fn recover_resources(problem: &RelaxedProblem<'_>, x: &Array2<f64>) -> AllocationPoint {
    problem.recover_point(x)
}

/// Association and multipliers to resume ADMM from.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub global: Array2<f64>,
    pub lambda: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub alpha: Vec<f64>,
    /// Final ADMM state, usable as a warm start at a nearby split.
    pub warm: Option<WarmStart>,
    pub relaxed: AllocationPoint,
    pub relaxed_objective: f64,
    pub point: AllocationPoint,
    /// Objective of the recovered allocation.
    pub objective: f64,
    pub utilities: UtilityBreakdown,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub termination: Termination,
}

impl SolveReport {
    /// First iteration whose consensus gap is at most `threshold`.
    pub fn consensus_iteration(&self, threshold: f64) -> Option<usize> {
        self.trace.iter().find(|r| r.consensus_gap <= threshold).map(|r| r.iter)
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        write_trace_csv(&self.trace, out)
    }
}

fn finish(
    problem: &RelaxedProblem<'_>,
    relaxed_x: Array2<f64>,
    trace: Vec<TraceRow>,
    iterations: usize,
    termination: Termination,
) -> SolveReport {
    let eval = problem.evaluate_association(&relaxed_x);
    let binary = recover_association(problem, &relaxed_x);
    let point = recover_resources(problem, &binary);
    let rec = point.recovered.as_ref().expect("recovered");
    let utilities = utility::report_utilities(
        &point.x,
        &rec.y,
        &rec.z,
        problem.scenario,
        &problem.rates,
        problem.scheme.pricing,
    );
    SolveReport {
        alpha: problem.alpha().to_vec(),
        warm: None,
        relaxed_objective: eval.value,
        relaxed: AllocationPoint { x: relaxed_x, ytilde: eval.ytilde, recovered: None },
        objective: problem.objective(&point),
        point,
        utilities,
        trace,
        iterations,
        termination,
    }
}

fn norm2(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Runs consensus ADMM from the uniform association with zero multipliers,
/// then rounds and recovers the allocation.
pub fn run_admm(problem: &RelaxedProblem<'_>, cfg: &AdmmConfig) -> Result<SolveReport> {
    run_admm_from(problem, cfg, None)
}

/// As [`run_admm`], optionally resuming from an earlier state. The start is
/// projected onto the current candidate sets.
pub fn run_admm_from(problem: &RelaxedProblem<'_>, cfg: &AdmmConfig, warm: Option<&WarmStart>) -> Result<SolveReport> {
    cfg.validate()?;
    let m_count = problem.inps.len();
    let dim = problem.candidates.raw_dim();
    let (x0, lambda0) = match warm {
        Some(w) if w.global.raw_dim() == dim && w.lambda.len() == m_count => {
            let mut x = w.global.clone();
            project_rows(&mut x, &problem.candidates);
            (x, w.lambda.clone())
        }
        _ => (problem.uniform_association(), vec![Array2::zeros(dim); m_count]),
    };
    let mut state = AdmmState {
        iteration: 0,
        local: vec![x0.clone(); m_count],
        local_shares: Vec::new(),
        global: x0,
        lambda: lambda0,
        rho: cfg.rho,
        trace: Vec::new(),
    };
    if problem.num_users() == 0 || m_count == 0 {
        return Ok(finish(problem, state.global, state.trace, 0, Termination::Converged));
    }
    let mut best = (f64::NEG_INFINITY, state.global.clone());
    let mut termination = Termination::IterationCap;
    while state.iteration < cfg.max_iter {
        let solutions: Vec<LocalSolution> = problem
            .inps
            .par_iter()
            .enumerate()
            .map(|(m, model)| {
                local_update(
                    model,
                    &problem.candidates,
                    &state.global,
                    &state.lambda[m],
                    cfg.rho,
                    &state.local[m],
                    cfg,
                )
            })
            .collect();
        let inner_warnings = solutions.iter().filter(|s| !s.converged).count();
        state.local = solutions.iter().map(|s| s.xz.clone()).collect();
        state.local_shares = solutions.into_iter().map(|s| s.ytilde).collect();
        let next = global_update(&state.local, &state.lambda, cfg.rho);
        for m in 0..m_count {
            dual_update(&mut state.lambda[m], &state.local[m], &next, cfg.rho);
        }
        let step = norm2(&(&next - &state.global));
        let primal = state.local.iter().map(|z| norm2(&(z - &next)).powi(2)).sum::<f64>().sqrt();
        let gap = state
            .local
            .iter()
            .flat_map(|z| z.iter().zip(next.iter()).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        state.global = next;
        state.iteration += 1;
        let objective = problem.evaluate_association(&state.global).value;
        if objective > best.0 {
            best = (objective, state.global.clone());
        }
        state.trace.push(TraceRow {
            iter: state.iteration,
            objective,
            best_objective: best.0,
            primal_residual: primal,
            dual_residual: cfg.rho * step,
            consensus_gap: gap,
            step,
            inner_warnings,
        });
        if step <= cfg.xi2 && gap <= cfg.xi2 {
            termination = Termination::Converged;
            break;
        }
    }
    let iterations = state.iteration;
    let warm = WarmStart { global: state.global.clone(), lambda: state.lambda };
    let final_x = match termination {
        Termination::Converged => state.global,
        Termination::IterationCap => best.1,
    };
    let mut report = finish(problem, final_x, state.trace, iterations, termination);
    report.warm = Some(warm);
    Ok(report)
}

/// `sum_u (max_j D_uj - sum_j x_uj D_uj)`: bounds the distance to the
/// relaxed optimum since the reduced objective is concave.
pub fn duality_gap(x: &Array2<f64>, marginal: &Array2<f64>, candidates: &Array2<bool>) -> f64 {
    let mut gap = 0.0;
    for u in 0..x.nrows() {
        let mut best = f64::NEG_INFINITY;
        let mut avg = 0.0;
        for c in 0..x.ncols() {
            if candidates[[u, c]] {
                best = best.max(marginal[[u, c]]);
                avg += x[[u, c]] * marginal[[u, c]];
            }
        }
        if best.is_finite() {
            gap += best - avg;
        }
    }
    gap
}

/// Multiplicative step `x <- x exp(eta D)`, renormalized per row.
fn entropic_step(x: &Array2<f64>, marginal: &Array2<f64>, candidates: &Array2<bool>, eta: f64) -> Array2<f64> {
    const FLOOR: f64 = 1e-200;
    let mut out = Array2::zeros(x.raw_dim());
    for u in 0..x.nrows() {
        let top = (0..x.ncols())
            .filter(|&c| candidates[[u, c]])
            .map(|c| marginal[[u, c]])
            .fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            continue;
        }
        let mut sum = 0.0;
        for c in 0..x.ncols() {
            if candidates[[u, c]] {
                let w = x[[u, c]].max(FLOOR) * (eta * (marginal[[u, c]] - top)).exp();
                out[[u, c]] = w;
                sum += w;
            }
        }
        for c in 0..x.ncols() {
            if candidates[[u, c]] {
                out[[u, c]] = (out[[u, c]] / sum).max(FLOOR);
            }
        }
    }
    out
}

/// Reference solve of the relaxed problem as one program: entropic mirror
/// ascent on the reduced objective, stopped once the duality gap is below
/// `1e-7` of the objective.
pub fn solve_centralized(problem: &RelaxedProblem<'_>) -> Result<SolveReport> {
    const GAP_REL: f64 = 1e-7;
    const MAX_ITER: usize = 20_000;
    let mut x = problem.uniform_association();
    if problem.num_users() == 0 {
        return Ok(finish(problem, x, Vec::new(), 0, Termination::Converged));
    }
    let cand = &problem.candidates;
    let mut e = problem.evaluate_association(&x);
    let scale = e.marginal.iter().filter(|v| v.is_finite()).fold(1.0f64, |m, v| m.max(v.abs()));
    let mut eta = 1.0 / scale;
    let mut rows = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut termination = Termination::IterationCap;
    let mut iterations = MAX_ITER;
    for it in 0..MAX_ITER {
        let gap = duality_gap(&x, &e.marginal, cand);
        best = best.max(e.value);
        rows.push(TraceRow {
            iter: it + 1,
            objective: e.value,
            best_objective: best,
            primal_residual: gap,
            dual_residual: 0.0,
            consensus_gap: 0.0,
            step: eta,
            inner_warnings: 0,
        });
        if gap <= GAP_REL * e.value.abs().max(1.0) {
            termination = Termination::Converged;
            iterations = it;
            break;
        }
        let mut accepted = None;
        for _ in 0..80 {
            let trial = entropic_step(&x, &e.marginal, cand, eta);
            let et = problem.evaluate_association(&trial);
            let mut lin = 0.0;
            let mut kl = 0.0;
            for ((&t, &x0), (&d, &ok)) in trial.iter().zip(&x).zip(e.marginal.iter().zip(cand)) {
                if ok && t > 0.0 {
                    lin += d * (t - x0);
                    kl += t * (t / x0.max(1e-200)).ln();
                }
            }
            let slack = 1e-12 * e.value.abs();
            if et.value >= e.value + lin - kl / eta - slack {
                accepted = Some((trial, et));
                break;
            }
            eta *= 0.5;
        }
        let Some((trial, et)) = accepted else {
            iterations = it;
            break;
        };
        x = trial;
        e = et;
        eta *= 2.0;
    }
    Ok(finish(problem, x, rows, iterations, termination))
}
