//! The relaxed association problem at a fixed spectrum split.
//!
//! Decision variables are the time-sharing association weights `x` and the
//! perspective resource shares `ytilde = x * y`, both stored as `U x K`
//! matrices with one column per base station. For fixed `x` the problem in
//! `ytilde` separates by InP and is solved exactly by [`InpModel::best_response`]
//! through a price search on the per-cell time budget, the backhaul coupling
//! and the InP-wide backhaul slot budget.

use std::fmt;
use std::io::Write;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::rates::{build_rate_table, RateTable};
use crate::roots::find_root;
use crate::scenario::{BsId, Scenario};
use crate::utility::{self, BackhaulPricing};

/// Which network features are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scheme {
    /// Users may attach to any InP; otherwise only to their MVNO's home InP.
    pub virtualization: bool,
    pub pricing: BackhaulPricing,
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme {
            virtualization: true,
            pricing: BackhaulPricing::SelfBackhaul,
        }
    }
}

impl Scheme {
    pub fn full_duplex(&self) -> bool {
        self.pricing == BackhaulPricing::SelfBackhaul
    }

    pub fn label(&self) -> &'static str {
        match (self.virtualization, self.full_duplex()) {
            (true, true) => "virt+fd",
            (true, false) => "virt",
            (false, true) => "fd",
            (false, false) => "baseline",
        }
    }
}

/// Binary association with the resource shares and backhaul slot shares
/// recovered from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovered {
    pub y: Array2<f64>,
    /// Backhaul slot share per base-station column (zero for macro columns).
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPoint {
    pub x: Array2<f64>,
    pub ytilde: Array2<f64>,
    pub recovered: Option<Recovered>,
}

impl AllocationPoint {
    pub fn zeros(users: usize, cols: usize) -> Self {
        AllocationPoint {
            x: Array2::zeros((users, cols)),
            ytilde: Array2::zeros((users, cols)),
            recovered: None,
        }
    }

    pub fn is_recovered(&self) -> bool {
        self.recovered.is_some()
    }

    pub fn write_csv<W: Write>(&self, scenario: &Scenario, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# fdvrm allocation v1")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user", "inp", "bs", "x", "ytilde", "y", "z"])?;
        for u in 0..self.x.nrows() {
            for c in 0..self.x.ncols() {
                let bs = scenario.bs(c);
                let (y, z) = match &self.recovered {
                    Some(r) if !bs.is_macro() => (format!("{:e}", r.y[[u, c]]), format!("{:e}", r.z[c])),
                    Some(r) => (format!("{:e}", r.y[[u, c]]), String::new()),
                    None => (String::new(), String::new()),
                };
                w.write_record([
                    u.to_string(),
                    bs.inp.to_string(),
                    bs.slot.to_string(),
                    format!("{:e}", self.x[[u, c]]),
                    format!("{:e}", self.ytilde[[u, c]]),
                    y,
                    z,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One base station as seen by its InP at a fixed spectrum split.
#[derive(Debug, Clone)]
pub struct CellModel {
    pub slot: usize,
    /// Price per unit time share.
    pub price: f64,
    /// Access rate per user; zero marks a user that may not attach here.
    pub rates: Vec<f64>,
    /// Backhaul capacity; zero for the macro cell.
    pub backhaul: f64,
    /// Quadratic backhaul cost coefficient: cost `quad * load^2`.
    pub quad: f64,
    /// Linear backhaul cost coefficient: cost `lin * load`.
    pub lin: f64,
}

impl CellModel {
    pub fn is_macro(&self) -> bool {
        self.slot == 0
    }

    pub fn backhaul_cost(&self, load: f64) -> f64 {
        if self.is_macro() || load <= 0.0 {
            0.0
        } else {
            self.quad * load * load + self.lin * load
        }
    }
}

/// Shadow prices of one cell: a user with payment `delta` and rate `r` gets
/// resource ratio `min(1, delta / (a + b r))` per unit of association.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellPrice {
    pub a: f64,
    pub b: f64,
}

impl CellPrice {
    pub fn ratio(&self, delta: f64, rate: f64) -> f64 {
        let p = self.a + self.b * rate;
        if p <= delta {
            1.0
        } else {
            delta / p
        }
    }

    /// Marginal value of association weight at these prices.
    pub fn marginal(&self, delta: f64, rate: f64) -> f64 {
        if rate <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let y = self.ratio(delta, rate);
        delta * (y * rate).ln() - (self.a + self.b * rate) * y
    }
}

/// Everything InP `m` knows about itself at spectrum split `alpha`.
#[derive(Debug, Clone)]
pub struct InpModel {
    pub inp: usize,
    pub alpha: f64,
    /// First global column of this InP.
    pub col_offset: usize,
    pub payment: Vec<f64>,
    pub cells: Vec<CellModel>,
}

/// Exact share allocation of one InP for a fixed association.
#[derive(Debug, Clone)]
pub struct InpResponse {
    /// `U x cells`.
    pub ytilde: Array2<f64>,
    pub prices: Vec<CellPrice>,
    pub loads: Vec<f64>,
    pub value: f64,
}

impl InpResponse {
    /// Gradient of the InP value with respect to its association columns.
    pub fn marginals(&self, model: &InpModel) -> Array2<f64> {
        let mut d = Array2::from_elem(self.ytilde.raw_dim(), f64::NEG_INFINITY);
        for (k, cell) in model.cells.iter().enumerate() {
            for u in 0..model.payment.len() {
                d[[u, k]] = self.prices[k].marginal(model.payment[u], cell.rates[u]);
            }
        }
        d
    }
}

impl InpModel {
    pub fn num_users(&self) -> usize {
        self.payment.len()
    }

    pub fn is_candidate(&self, user: usize, slot: usize) -> bool {
        self.cells[slot].rates[user] > 0.0
    }

    /// Total resource share and backhaul load of a cell at prices `(a, b0 + 2 quad S)`.
    fn cell_load(&self, cell: &CellModel, x: &[f64], a: f64, b0: f64) -> (f64, f64) {
        let eval = |s: f64| -> (f64, f64) {
            let price = CellPrice { a, b: b0 + 2.0 * cell.quad * s };
            let mut share = 0.0;
            let mut load = 0.0;
            for (u, &xu) in x.iter().enumerate() {
                let r = cell.rates[u];
                if xu > 0.0 && r > 0.0 {
                    let y = price.ratio(self.payment[u], r);
                    share += xu * y;
                    load += xu * y * r;
                }
            }
            (share, load)
        };
        if cell.quad == 0.0 {
            return eval(0.0);
        }
        let s_max: f64 = x.iter().zip(&cell.rates).map(|(xu, r)| xu * r).sum();
        if s_max <= 0.0 {
            return (0.0, 0.0);
        }
        let (_, at_max) = eval(s_max);
        if at_max >= s_max {
            return eval(s_max);
        }
        let s = find_root(|s| eval(s).1 - s, 0.0, s_max);
        eval(s)
    }

    /// Prices of a cell given the InP backhaul slot price `pi`; returns
    /// `(price, load)`.
    fn solve_cell(&self, cell: &CellModel, x: &[f64], pi: f64) -> (CellPrice, f64) {
        let b0 = if cell.is_macro() {
            0.0
        } else {
            cell.lin + pi / cell.backhaul
        };
        let finish = |a: f64| {
            let (_, load) = self.cell_load(cell, x, a, b0);
            (CellPrice { a, b: b0 + 2.0 * cell.quad * load }, load)
        };
        let (share, _) = self.cell_load(cell, x, cell.price, b0);
        if share <= 1.0 {
            return finish(cell.price);
        }
        let demand: f64 = x.iter().zip(&self.payment).map(|(xu, d)| xu * d).sum();
        let hi = cell.price + demand * (1.0 + 1e-9) + f64::MIN_POSITIVE;
        let a = find_root(|a| self.cell_load(cell, x, a, b0).0 - 1.0, cell.price, hi);
        // stay on the feasible side of the time budget
        let (share, _) = self.cell_load(cell, x, a, b0);
        let a = if share > 1.0 { a * (1.0 + 4.0 * f64::EPSILON) } else { a };
        finish(a)
    }

    fn solve_all(&self, x: ArrayView2<f64>, pi: f64) -> Vec<(CellPrice, f64)> {
        self.cells
            .iter()
            .enumerate()
            .map(|(k, cell)| {
                let col: Vec<f64> = x.column(k).to_vec();
                self.solve_cell(cell, &col, pi)
            })
            .collect()
    }

    fn slot_usage(&self, sol: &[(CellPrice, f64)]) -> f64 {
        self.cells
            .iter()
            .zip(sol)
            .filter(|(c, _)| !c.is_macro() && c.backhaul > 0.0)
            .map(|(c, (_, load))| load / c.backhaul)
            .sum()
    }

    /// Optimal shares for association `x` (`U x cells`, this InP's columns).
    pub fn best_response(&self, x: ArrayView2<f64>) -> InpResponse {
        let mut sol = self.solve_all(x, 0.0);
        if self.slot_usage(&sol) > 1.0 {
            let demand: f64 = self
                .cells
                .iter()
                .enumerate()
                .filter(|(_, c)| !c.is_macro())
                .map(|(k, _)| x.column(k).iter().zip(&self.payment).map(|(xu, d)| xu * d).sum::<f64>())
                .sum();
            let hi = demand * (1.0 + 1e-9) + f64::MIN_POSITIVE;
            let pi = find_root(|pi| self.slot_usage(&self.solve_all(x, pi)) - 1.0, 0.0, hi);
            sol = self.solve_all(x, pi);
            if self.slot_usage(&sol) > 1.0 {
                sol = self.solve_all(x, pi * (1.0 + 4.0 * f64::EPSILON));
            }
        }
        let users = self.num_users();
        let mut ytilde = Array2::zeros((users, self.cells.len()));
        let mut value = 0.0;
        let mut loads = Vec::with_capacity(self.cells.len());
        for (k, cell) in self.cells.iter().enumerate() {
            let price = sol[k].0;
            let mut load = 0.0;
            for u in 0..users {
                let xu = x[[u, k]];
                let r = cell.rates[u];
                if xu > 0.0 && r > 0.0 {
                    let yt = xu * price.ratio(self.payment[u], r);
                    ytilde[[u, k]] = yt;
                    load += yt * r;
                    value += self.payment[u] * utility::fairness_term(xu, yt, r) - cell.price * yt;
                }
            }
            value -= cell.backhaul_cost(load);
            loads.push(load);
        }
        InpResponse {
            ytilde,
            prices: sol.into_iter().map(|(p, _)| p).collect(),
            loads,
            value,
        }
    }
}

/// Identifies a constraint family of the allocation problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintId {
    /// Backhaul throughput covers the small-cell access throughput (C1).
    BackhaulThroughput,
    /// Association weights in `[0, 1]`, binary once recovered (C2).
    AssociationRange,
    /// Every user is associated exactly once (C3).
    AssociationSum,
    /// `0 <= ytilde <= x`, and `0 <= y <= 1` once recovered (C4).
    ShareRange,
    /// Time shares of one cell sum to at most 1 (C5).
    CellBudget,
    /// Small-cell backhaul load within its link rate (C6).
    BackhaulLink,
    /// Backhaul slots of one InP sum to at most 1 (C7).
    BackhaulSlots,
    /// Association to a base station the user may not use.
    NotCandidate,
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConstraintId::BackhaulThroughput => "C1",
            ConstraintId::AssociationRange => "C2",
            ConstraintId::AssociationSum => "C3",
            ConstraintId::ShareRange => "C4",
            ConstraintId::CellBudget => "C5",
            ConstraintId::BackhaulLink => "C6",
            ConstraintId::BackhaulSlots => "C7",
            ConstraintId::NotCandidate => "candidate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub constraint: ConstraintId,
    pub user: Option<usize>,
    pub col: Option<usize>,
    pub magnitude: f64,
}

/// Value and gradient of the problem reduced to the association variables.
#[derive(Debug, Clone)]
pub struct AssociationEval {
    pub value: f64,
    pub ytilde: Array2<f64>,
    /// `dV/dx`, `-inf` where the user may not attach.
    pub marginal: Array2<f64>,
}

/// The relaxed problem at fixed spectrum split `alpha`.
#[derive(Debug, Clone)]
pub struct RelaxedProblem<'a> {
    pub scenario: &'a Scenario,
    pub scheme: Scheme,
    pub rates: RateTable,
    pub candidates: Array2<bool>,
    pub inps: Vec<InpModel>,
}

const DYKSTRA_MAX_SWEEPS: usize = 20_000;
const DYKSTRA_TOL: f64 = 1e-9;

impl<'a> RelaxedProblem<'a> {
    pub fn new(scenario: &'a Scenario, alpha: &[f64], scheme: Scheme) -> Result<Self> {
        let rates = build_rate_table(scenario, alpha)?;
        let users = scenario.num_users();
        let cols = scenario.num_bs();
        let mut candidates = Array2::from_elem((users, cols), false);
        for u in 0..users {
            let home = scenario.home_inp(scenario.mvno_of_user[u]);
            for c in 0..cols {
                let bs = scenario.bs(c);
                let allowed = scheme.virtualization || bs.inp == home;
                let linked = bs.is_macro() || rates.backhaul[c] > 0.0;
                candidates[[u, c]] = allowed && linked && rates.access[[u, c]] > 0.0;
            }
        }
        let inps = (0..scenario.num_inps())
            .map(|m| {
                let a = alpha[m];
                let p_macro = scenario.macro_power_w(m);
                let cells = (0..scenario.bs_per_inp())
                    .map(|slot| {
                        let bs = BsId { inp: m, slot };
                        let c = scenario.col(bs);
                        let backhaul = rates.backhaul[c];
                        let (quad, lin) = if bs.is_macro() || backhaul <= 0.0 {
                            (0.0, 0.0)
                        } else {
                            match scheme.pricing {
                                BackhaulPricing::SelfBackhaul => ((1.0 - a) * p_macro / backhaul, 0.0),
                                BackhaulPricing::External => (0.0, (1.0 - a) * p_macro),
                            }
                        };
                        CellModel {
                            slot,
                            price: utility::unit_resource_price(scenario, bs, a),
                            rates: (0..users)
                                .map(|u| if candidates[[u, c]] { rates.access[[u, c]] } else { 0.0 })
                                .collect(),
                            backhaul,
                            quad,
                            lin,
                        }
                    })
                    .collect();
                InpModel {
                    inp: m,
                    alpha: a,
                    col_offset: scenario.col(BsId { inp: m, slot: 0 }),
                    payment: (0..users).map(|u| scenario.payment(u)).collect(),
                    cells,
                }
            })
            .collect();
        Ok(RelaxedProblem {
            scenario,
            scheme,
            rates,
            candidates,
            inps,
        })
    }

    pub fn num_users(&self) -> usize {
        self.scenario.num_users()
    }

    pub fn num_cols(&self) -> usize {
        self.scenario.num_bs()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.rates.alpha
    }

    pub fn has_candidate(&self, user: usize) -> bool {
        self.candidates.row(user).iter().any(|&c| c)
    }

    fn inp_cols(&self, m: usize) -> std::ops::Range<usize> {
        let start = self.inps[m].col_offset;
        start..start + self.scenario.bs_per_inp()
    }

    pub fn objective(&self, point: &AllocationPoint) -> f64 {
        utility::vrm_objective(&point.x, &point.ytilde, self.scenario, &self.rates, self.scheme.pricing)
    }

    /// Analytic gradient `(d/dx, d/dytilde)`. Defined where `x > 0` and
    /// `ytilde > 0`; entries of non-candidate pairs are zero and entries on
    /// the boundary follow the raw formula (possibly infinite).
    pub fn gradient(&self, point: &AllocationPoint) -> (Array2<f64>, Array2<f64>) {
        let users = self.num_users();
        let cols = self.num_cols();
        let mut gx = Array2::zeros((users, cols));
        let mut gy = Array2::zeros((users, cols));
        for model in &self.inps {
            for (k, cell) in model.cells.iter().enumerate() {
                let c = model.col_offset + k;
                let load: f64 = (0..users).map(|u| point.ytilde[[u, c]] * self.rates.access[[u, c]]).sum();
                // d/dload of quad * load^2 + lin * load
                let backhaul_slope = 2.0 * cell.quad * load + cell.lin;
                for u in 0..users {
                    if !self.candidates[[u, c]] {
                        continue;
                    }
                    let (x, yt) = (point.x[[u, c]], point.ytilde[[u, c]]);
                    let r = self.rates.access[[u, c]];
                    let delta = model.payment[u];
                    gx[[u, c]] = delta * ((yt * r / x).ln() - 1.0);
                    gy[[u, c]] = delta * x / yt - cell.price - backhaul_slope * r;
                }
            }
        }
        (gx, gy)
    }

    /// Exact optimal shares for association `x`, the resulting objective and
    /// its gradient in `x`.
    pub fn evaluate_association(&self, x: &Array2<f64>) -> AssociationEval {
        let users = self.num_users();
        let cols = self.num_cols();
        let mut ytilde = Array2::zeros((users, cols));
        let mut marginal = Array2::from_elem((users, cols), f64::NEG_INFINITY);
        let mut value = 0.0;
        for (m, model) in self.inps.iter().enumerate() {
            let range = self.inp_cols(m);
            let view = x.slice(ndarray::s![.., range.clone()]);
            let resp = model.best_response(view);
            value += resp.value;
            let d = resp.marginals(model);
            ytilde.slice_mut(ndarray::s![.., range.clone()]).assign(&resp.ytilde);
            marginal.slice_mut(ndarray::s![.., range]).assign(&d);
        }
        AssociationEval { value, ytilde, marginal }
    }

    /// Uniform association over candidates with shares split evenly among a
    /// cell's candidate users, projected onto the feasible set.
    pub fn initial_point(&self) -> Result<AllocationPoint> {
        let x = self.uniform_association();
        let users = self.num_users();
        let cols = self.num_cols();
        let mut ytilde = Array2::zeros((users, cols));
        for c in 0..cols {
            let n = (0..users).filter(|&u| self.candidates[[u, c]]).count().max(1) as f64;
            for u in 0..users {
                ytilde[[u, c]] = x[[u, c]] / n;
            }
        }
        self.project(&AllocationPoint { x, ytilde, recovered: None })
    }

    pub fn uniform_association(&self) -> Array2<f64> {
        let users = self.num_users();
        let mut x = Array2::zeros((users, self.num_cols()));
        for u in 0..users {
            let n = self.candidates.row(u).iter().filter(|&&c| c).count();
            if n == 0 {
                continue;
            }
            for c in 0..self.num_cols() {
                if self.candidates[[u, c]] {
                    x[[u, c]] = 1.0 / n as f64;
                }
            }
        }
        x
    }

    /// Projects every row of `x` onto the unit simplex over the user's candidates.
    pub fn project_association(&self, x: &mut Array2<f64>) {
        let cols = self.num_cols();
        let mut buf = Vec::with_capacity(cols);
        for u in 0..self.num_users() {
            buf.clear();
            buf.extend((0..cols).filter(|&c| self.candidates[[u, c]]).map(|c| x[[u, c]]));
            if buf.is_empty() {
                x.row_mut(u).fill(0.0);
                continue;
            }
            project_simplex(&mut buf);
            let mut it = buf.iter();
            for c in 0..cols {
                x[[u, c]] = if self.candidates[[u, c]] { *it.next().unwrap() } else { 0.0 };
            }
        }
    }

    /// Euclidean projection of `(x, ytilde)` onto the relaxed feasible set by
    /// Dykstra's alternating projections. When those stall the last iterate
    /// is repaired, so the result is feasible but only nearly nearest.
    pub fn project(&self, point: &AllocationPoint) -> Result<AllocationPoint> {
        let users = self.num_users();
        let cols = self.num_cols();
        if self.max_violation(point) <= DYKSTRA_TOL {
            let mut out = point.clone();
            out.recovered = None;
            return Ok(out);
        }
        let mut cur = (point.x.clone(), point.ytilde.clone());
        const SETS: usize = 5;
        let mut incr: Vec<(Array2<f64>, Array2<f64>)> =
            (0..SETS).map(|_| (Array2::zeros((users, cols)), Array2::zeros((users, cols)))).collect();
        for sweep in 0..DYKSTRA_MAX_SWEEPS {
            for (k, inc) in incr.iter_mut().enumerate() {
                let mut px = &cur.0 + &inc.0;
                let mut py = &cur.1 + &inc.1;
                let (before_x, before_y) = (px.clone(), py.clone());
                match k {
                    0 => self.project_association(&mut px),
                    1 => self.project_share_pairs(&mut px, &mut py),
                    2 => self.project_cell_budgets(&mut py),
                    3 => self.project_backhaul_links(&mut py),
                    _ => self.project_backhaul_slots(&mut py),
                }
                inc.0 = &before_x - &px;
                inc.1 = &before_y - &py;
                cur = (px, py);
            }
            let candidate = AllocationPoint {
                x: cur.0.clone(),
                ytilde: cur.1.clone(),
                recovered: None,
            };
            if self.max_violation(&candidate) <= DYKSTRA_TOL {
                return Ok(candidate);
            }
            if sweep + 1 == DYKSTRA_MAX_SWEEPS {
                let repaired = self.repair(candidate);
                let v = self.max_violation(&repaired);
                if v <= DYKSTRA_TOL {
                    return Ok(repaired);
                }
                return Err(Error::ProjectionDiverged { iterations: sweep + 1, violation: v });
            }
        }
        unreachable!()
    }

    /// Feasible point near a nearly feasible one: rows onto the simplex,
    /// shares clipped into `[0, x]`, then scaled down per cell and per InP.
    fn repair(&self, mut point: AllocationPoint) -> AllocationPoint {
        self.project_association(&mut point.x);
        let (users, cols) = (self.num_users(), self.num_cols());
        for u in 0..users {
            for c in 0..cols {
                let y = &mut point.ytilde[[u, c]];
                *y = if self.candidates[[u, c]] { y.clamp(0.0, point.x[[u, c]]) } else { 0.0 };
            }
        }
        let load = |y: &Array2<f64>, c: usize| -> f64 { (0..users).map(|u| y[[u, c]] * self.rates.access[[u, c]]).sum() };
        for c in 0..cols {
            let budget: f64 = point.ytilde.column(c).sum();
            let mut scale = if budget > 1.0 { 1.0 / budget } else { 1.0 };
            if !self.scenario.bs(c).is_macro() {
                let bh = self.rates.backhaul[c];
                let l = load(&point.ytilde, c) * scale;
                if bh <= 0.0 && l > 0.0 {
                    scale = 0.0;
                } else if l > bh {
                    scale *= bh / l;
                }
            }
            if scale < 1.0 {
                point.ytilde.column_mut(c).mapv_inplace(|v| v * scale);
            }
        }
        for m in 0..self.inps.len() {
            let small: Vec<usize> = self.small_cols(m).collect();
            let slots: f64 = small.iter().map(|&c| load(&point.ytilde, c) / self.rates.backhaul[c]).sum();
            if slots > 1.0 {
                for &c in &small {
                    point.ytilde.column_mut(c).mapv_inplace(|v| v / slots);
                }
            }
        }
        point
    }

    fn project_share_pairs(&self, x: &mut Array2<f64>, y: &mut Array2<f64>) {
        for u in 0..self.num_users() {
            for c in 0..self.num_cols() {
                if !self.candidates[[u, c]] {
                    y[[u, c]] = 0.0;
                    continue;
                }
                let (p, q) = (x[[u, c]], y[[u, c]]);
                let (np, nq) = if q >= 0.0 && q <= p {
                    (p, q)
                } else if q > p {
                    let t = 0.5 * (p + q);
                    if t >= 0.0 {
                        (t, t)
                    } else {
                        (0.0, 0.0)
                    }
                } else {
                    (p.max(0.0), 0.0)
                };
                x[[u, c]] = np;
                y[[u, c]] = nq;
            }
        }
    }

    fn project_halfspace(&self, y: &mut Array2<f64>, terms: &[(usize, usize, f64)], bound: f64) {
        let dot: f64 = terms.iter().map(|&(u, c, a)| a * y[[u, c]]).sum();
        if dot <= bound {
            return;
        }
        let norm2: f64 = terms.iter().map(|&(_, _, a)| a * a).sum();
        if norm2 == 0.0 {
            return;
        }
        let step = (dot - bound) / norm2;
        for &(u, c, a) in terms {
            y[[u, c]] -= step * a;
        }
    }

    fn project_cell_budgets(&self, y: &mut Array2<f64>) {
        for c in 0..self.num_cols() {
            let terms: Vec<_> = (0..self.num_users())
                .filter(|&u| self.candidates[[u, c]])
                .map(|u| (u, c, 1.0))
                .collect();
            self.project_halfspace(y, &terms, 1.0);
        }
    }

    fn backhaul_terms(&self, c: usize) -> Vec<(usize, usize, f64)> {
        let bh = self.rates.backhaul[c];
        (0..self.num_users())
            .filter(|&u| self.candidates[[u, c]])
            .map(|u| (u, c, self.rates.access[[u, c]] / bh))
            .collect()
    }

    fn small_cols(&self, m: usize) -> impl Iterator<Item = usize> + '_ {
        self.inp_cols(m)
            .filter(move |&c| !self.scenario.bs(c).is_macro() && self.rates.backhaul[c] > 0.0)
    }

    fn project_backhaul_links(&self, y: &mut Array2<f64>) {
        for m in 0..self.inps.len() {
            for c in self.small_cols(m).collect::<Vec<_>>() {
                let terms = self.backhaul_terms(c);
                self.project_halfspace(y, &terms, 1.0);
            }
        }
    }

    fn project_backhaul_slots(&self, y: &mut Array2<f64>) {
        for m in 0..self.inps.len() {
            let terms: Vec<_> = self.small_cols(m).flat_map(|c| self.backhaul_terms(c)).collect();
            self.project_halfspace(y, &terms, 1.0);
        }
    }

    /// Largest constraint violation, with backhaul link violations measured
    /// relative to the link rate.
    pub fn max_violation(&self, point: &AllocationPoint) -> f64 {
        self.check_feasible(point, 0.0)
            .iter()
            .map(|v| match v.constraint {
                ConstraintId::BackhaulLink | ConstraintId::BackhaulThroughput => {
                    v.magnitude / self.rates.backhaul[v.col.unwrap()].max(1.0)
                }
                _ => v.magnitude,
            })
            .fold(0.0, f64::max)
    }

    /// Lists every violated constraint. Magnitudes are in the constraint's
    /// own units (bit/s for backhaul links, shares otherwise); a violation is
    /// reported when it exceeds `tol` (scaled by the link rate for C1/C6).
    pub fn check_feasible(&self, point: &AllocationPoint, tol: f64) -> Vec<Violation> {
        let users = self.num_users();
        let cols = self.num_cols();
        let mut out = Vec::new();
        let mut push = |constraint, user, col, magnitude: f64, scale: f64| {
            if magnitude > tol * scale {
                out.push(Violation { constraint, user, col, magnitude });
            }
        };
        let recovered = point.recovered.as_ref();
        for u in 0..users {
            let mut sum = 0.0;
            for c in 0..cols {
                let x = point.x[[u, c]];
                let yt = point.ytilde[[u, c]];
                sum += x;
                let range = (-x).max(x - 1.0).max(0.0);
                push(ConstraintId::AssociationRange, Some(u), Some(c), range, 1.0);
                if recovered.is_some() {
                    push(ConstraintId::AssociationRange, Some(u), Some(c), x.min(1.0 - x).max(0.0), 1.0);
                }
                if !self.candidates[[u, c]] {
                    push(ConstraintId::NotCandidate, Some(u), Some(c), x.abs().max(yt.abs()), 1.0);
                }
                push(ConstraintId::ShareRange, Some(u), Some(c), (-yt).max(yt - x).max(0.0), 1.0);
                if let Some(r) = recovered {
                    let y = r.y[[u, c]];
                    push(ConstraintId::ShareRange, Some(u), Some(c), (-y).max(y - 1.0).max(0.0), 1.0);
                }
            }
            let target = if self.has_candidate(u) { 1.0 } else { 0.0 };
            push(ConstraintId::AssociationSum, Some(u), None, (sum - target).abs(), 1.0);
        }
        for c in 0..cols {
            let budget: f64 = (0..users).map(|u| point.ytilde[[u, c]]).sum();
            push(ConstraintId::CellBudget, None, Some(c), budget - 1.0, 1.0);
        }
        for m in 0..self.inps.len() {
            let mut slots = 0.0;
            let mut z_sum = 0.0;
            for c in self.inp_cols(m) {
                if self.scenario.bs(c).is_macro() {
                    continue;
                }
                let bh = self.rates.backhaul[c];
                let load: f64 = (0..users).map(|u| point.ytilde[[u, c]] * self.rates.access[[u, c]]).sum();
                if bh <= 0.0 {
                    push(ConstraintId::BackhaulLink, None, Some(c), load, 1.0);
                    continue;
                }
                push(ConstraintId::BackhaulLink, None, Some(c), load - bh, bh);
                slots += load / bh;
                if let Some(r) = recovered {
                    let z = r.z[c];
                    z_sum += z;
                    push(ConstraintId::BackhaulSlots, None, Some(c), (-z).max(z - 1.0).max(0.0), 1.0);
                    push(ConstraintId::BackhaulThroughput, None, Some(c), load - z * bh, bh);
                }
            }
            push(ConstraintId::BackhaulSlots, None, None, slots - 1.0, 1.0);
            if recovered.is_some() {
                push(ConstraintId::BackhaulSlots, None, None, z_sum - 1.0, 1.0);
            }
        }
        out
    }

    /// Largest relative gap `|z R_bh - sum x y R| / R_bh` over small cells of
    /// a recovered point (zero when every backhaul constraint is tight).
    pub fn backhaul_slack(&self, point: &AllocationPoint) -> f64 {
        let Some(rec) = &point.recovered else {
            return f64::NAN;
        };
        let mut worst: f64 = 0.0;
        for c in 0..self.num_cols() {
            let bh = self.rates.backhaul[c];
            if self.scenario.bs(c).is_macro() || bh <= 0.0 {
                continue;
            }
            let carried: f64 = (0..self.num_users())
                .map(|u| point.x[[u, c]] * rec.y[[u, c]] * self.rates.access[[u, c]])
                .sum();
            worst = worst.max((rec.z[c] * bh - carried).abs() / bh);
        }
        worst
    }

    /// Builds the recovered point for a binary association: exact optimal
    /// shares, `y = ytilde / x` and backhaul slots at equality.
    pub fn recover_point(&self, x: &Array2<f64>) -> AllocationPoint {
        let eval = self.evaluate_association(x);
        let users = self.num_users();
        let cols = self.num_cols();
        let mut y = Array2::zeros((users, cols));
        for u in 0..users {
            for c in 0..cols {
                if x[[u, c]] > 0.0 {
                    y[[u, c]] = eval.ytilde[[u, c]] / x[[u, c]];
                }
            }
        }
        let mut z = vec![0.0; cols];
        for (c, zc) in z.iter_mut().enumerate() {
            let bh = self.rates.backhaul[c];
            if self.scenario.bs(c).is_macro() || bh <= 0.0 {
                continue;
            }
            let carried: f64 = (0..users).map(|u| x[[u, c]] * y[[u, c]] * self.rates.access[[u, c]]).sum();
            *zc = carried / bh;
        }
        AllocationPoint {
            x: x.clone(),
            ytilde: eval.ytilde,
            recovered: Some(Recovered { y, z }),
        }
    }

    /// Objective of the original problem at a recovered point, computed from
    /// `(x, y, z)` without the perspective substitution.
    pub fn original_objective(&self, point: &AllocationPoint) -> f64 {
        let rec = point.recovered.as_ref().expect("recovered point");
        utility::report_utilities(&point.x, &rec.y, &rec.z, self.scenario, &self.rates, self.scheme.pricing).total_vrm
    }
}

/// Euclidean projection onto `{v >= 0, sum v = 1}`.
pub fn project_simplex(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    for e in v.iter_mut() {
        *e = (*e - theta).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ScenarioConfig};

    pub(crate) fn desk(seed: u64) -> Scenario {
        generate_scenario(&ScenarioConfig {
            users_per_mvno: 2,
            sbs_per_inp: 1,
            area_side_m: 400.0,
            rng_seed: seed,
            ..ScenarioConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn simplex_projection() {
        let mut v = [1.5, 0.5];
        project_simplex(&mut v);
        assert!((v[0] - 1.0).abs() < 1e-15 && v[1] == 0.0);
        let mut v = [0.7, 0.7, 0.6];
        project_simplex(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let mut w = [0.2, 0.3, 0.5];
        project_simplex(&mut w);
        assert_eq!(w, [0.2, 0.3, 0.5]);
    }

    #[test]
    fn feasible_point_is_fixed_by_projection() {
        let s = desk(1);
        let p = RelaxedProblem::new(&s, &[0.5, 0.5], Scheme::default()).unwrap();
        let x = p.uniform_association();
        let point = AllocationPoint { ytilde: &x * 0.1, x, recovered: None };
        assert!(p.check_feasible(&point, 1e-12).is_empty());
        let q = p.project(&point).unwrap();
        assert!((&q.x - &point.x).iter().all(|d| d.abs() <= 1e-12));
        assert!((&q.ytilde - &point.ytilde).iter().all(|d| d.abs() <= 1e-12));
    }

    #[test]
    fn projection_repairs_rows_and_pairs() {
        let s = desk(2);
        let p = RelaxedProblem::new(&s, &[0.5, 0.5], Scheme::default()).unwrap();
        let mut point = AllocationPoint::zeros(4, 4);
        point.x.row_mut(0).fill(0.5);
        point.x.row_mut(1).assign(&ndarray::arr1(&[1.0, 0.5, 0.3, 0.2]));
        point.x[[2, 0]] = 1.0;
        point.x[[3, 3]] = 1.0;
        point.ytilde[[2, 0]] = 1.4;
        let q = p.project(&point).unwrap();
        assert!(p.check_feasible(&q, 1e-8).is_empty(), "{:?}", p.check_feasible(&q, 1e-8));
        for u in 0..4 {
            assert!((q.x.row(u).sum() - 1.0).abs() < 1e-8);
        }
        assert!(q.ytilde[[2, 0]] <= q.x[[2, 0]] + 1e-9);
    }

    #[test]
    fn overloaded_backhaul_reports_c6() {
        let s = desk(3);
        let p = RelaxedProblem::new(&s, &[0.5, 0.5], Scheme::default()).unwrap();
        let c = 1;
        let mut point = AllocationPoint::zeros(4, 4);
        for u in 0..4 {
            point.x[[u, c]] = 1.0;
        }
        point.ytilde[[0, c]] = 0.9;
        let load = 0.9 * p.rates.access[[0, c]];
        let bh = p.rates.backhaul[c];
        assert!(load > bh, "test instance needs an access link faster than its backhaul");
        let v = p.check_feasible(&point, 1e-7);
        let c6: Vec<_> = v.iter().filter(|v| v.constraint == ConstraintId::BackhaulLink).collect();
        assert_eq!(c6.len(), 1);
        assert!((c6[0].magnitude - (load - bh)).abs() <= 1e-9 * load);
        assert!(v.iter().any(|v| v.constraint == ConstraintId::BackhaulSlots));
    }

    #[test]
    fn zero_shares_on_simplex_are_feasible() {
        let s = desk(4);
        let p = RelaxedProblem::new(&s, &[0.5, 0.5], Scheme::default()).unwrap();
        let x = p.uniform_association();
        let point = AllocationPoint { ytilde: Array2::zeros(x.raw_dim()), x, recovered: None };
        assert!(p.check_feasible(&point, 1e-12).is_empty());
    }

    #[test]
    fn best_response_shares_are_feasible() {
        for seed in 0..5 {
            let s = generate_scenario(&ScenarioConfig { users_per_mvno: 6, rng_seed: seed, ..ScenarioConfig::default() }).unwrap();
            for scheme in [Scheme::default(), Scheme { virtualization: false, pricing: BackhaulPricing::External }] {
                let p = RelaxedProblem::new(&s, &[0.3, 0.6], scheme).unwrap();
                let x = p.uniform_association();
                let eval = p.evaluate_association(&x);
                let point = AllocationPoint { x, ytilde: eval.ytilde, recovered: None };
                assert!(p.check_feasible(&point, 1e-9).is_empty());
                let direct = p.objective(&point);
                assert!((direct - eval.value).abs() <= 1e-9 * direct.abs().max(1.0));
            }
        }
    }

    #[test]
    fn macro_only_share_matches_first_order_condition() {
        // single user, macro only: ytilde* = delta / (gamma alpha B P)
        let s = generate_scenario(&ScenarioConfig {
            num_inps: 1,
            num_mvnos: 1,
            users_per_mvno: 1,
            sbs_per_inp: 0,
            rng_seed: 9,
            ..ScenarioConfig::default()
        })
        .unwrap();
        let p = RelaxedProblem::new(&s, &[0.5], Scheme::default()).unwrap();
        let x = Array2::from_elem((1, 1), 1.0);
        let eval = p.evaluate_association(&x);
        let expected = (1e6 / (5.0 * 0.5 * 10e6 * s.macro_power_w(0))).min(1.0);
        assert!((eval.ytilde[[0, 0]] - expected).abs() < 1e-15);
        let point = AllocationPoint { x, ytilde: eval.ytilde, recovered: None };
        let (_, gy) = p.gradient(&point);
        assert!(gy[[0, 0]].abs() < 1e-6 * 1e6 / expected);
    }

    #[test]
    fn formulations_agree_on_recovered_points() {
        for seed in 0..10 {
            let s = generate_scenario(&ScenarioConfig { users_per_mvno: 5, rng_seed: seed, ..ScenarioConfig::default() }).unwrap();
            let p = RelaxedProblem::new(&s, &[0.5, 0.4], Scheme::default()).unwrap();
            let mut x = Array2::zeros((s.num_users(), s.num_bs()));
            for u in 0..s.num_users() {
                x[[u, (u * 7 + seed as usize) % s.num_bs()]] = 1.0;
            }
            p.project_association(&mut x);
            let point = p.recover_point(&x);
            let a = p.objective(&point);
            let b = p.original_objective(&point);
            assert!((a - b).abs() <= 1e-9 * a.abs(), "{a} vs {b}");
            assert!(p.backhaul_slack(&point) <= 1e-12);
            assert!(p.check_feasible(&point, 1e-7).is_empty());
        }
    }
}
