//! Separable concave maximization (and linear programming) under linear
//! constraints, returning primal and dual values.
//!
//! Problems are stated in minimization form
//!
//! ```text
//! min  Σ_j [ c_j·x_j − U_j(x_j) + ½·w_j·x_j² ]
//! s.t. A x = b,   lo ≤ G x ≤ hi,   l ≤ x ≤ u
//! ```
//!
//! where every `U_j` is a quasi-CPE utility or absent and `w_j ≥ 0` is an
//! optional tie-break weight. Duals satisfy
//! `∇f(x) + Aᵀy + Gᵀλ + λ_b = 0`, with range and bound duals signed as
//! (upper multiplier) − (lower multiplier).

mod ipm;
mod presolve;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::utility::QuasiCpeUtility;

/// Weight of the strictly convex term used to pick a canonical optimum.
pub const CANONICAL_TIE_BREAK: f64 = 1e-9;

/// Largest KKT residual accepted for an optimal status.
pub const OPTIMALITY_TOL: f64 = 1e-7;

/// Sparse row: `(variable index, coefficient)` pairs.
pub type Row = Vec<(usize, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConcaveProgram {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    tie_break: Vec<f64>,
    concave: Vec<Option<QuasiCpeUtility>>,
    eq_rows: Vec<Row>,
    eq_rhs: Vec<f64>,
    range_rows: Vec<Row>,
    range_lo: Vec<f64>,
    range_hi: Vec<f64>,
}

impl ConcaveProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_variables(&self) -> usize {
        self.cost.len()
    }

    pub fn num_equalities(&self) -> usize {
        self.eq_rows.len()
    }

    pub fn num_ranges(&self) -> usize {
        self.range_rows.len()
    }

    /// Adds a variable with bounds `[lower, upper]` (either may be infinite)
    /// and linear cost `cost`; returns its index.
    pub fn add_variable(&mut self, lower: f64, upper: f64, cost: f64) -> usize {
        self.lower.push(lower);
        self.upper.push(upper);
        self.cost.push(cost);
        self.tie_break.push(0.0);
        self.concave.push(None);
        self.cost.len() - 1
    }

    /// Attaches a utility to be maximized (i.e. `−U` enters the objective).
    pub fn set_concave(&mut self, var: usize, utility: QuasiCpeUtility) {
        self.concave[var] = Some(utility);
    }

    pub fn clear_concave(&mut self, var: usize) {
        self.concave[var] = None;
    }

    pub fn set_tie_break(&mut self, var: usize, weight: f64) {
        self.tie_break[var] = weight;
    }

    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) {
        self.lower[var] = lower;
        self.upper[var] = upper;
    }

    pub fn set_cost(&mut self, var: usize, cost: f64) {
        self.cost[var] = cost;
    }

    pub fn bounds(&self, var: usize) -> (f64, f64) {
        (self.lower[var], self.upper[var])
    }

    pub fn add_equality(&mut self, row: Row, rhs: f64) -> usize {
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
        self.eq_rows.len() - 1
    }

    /// Adds `lo ≤ row·x ≤ hi`; either side may be infinite.
    pub fn add_range(&mut self, row: Row, lo: f64, hi: f64) -> usize {
        self.range_rows.push(row);
        self.range_lo.push(lo);
        self.range_hi.push(hi);
        self.range_rows.len() - 1
    }

    pub fn add_less_equal(&mut self, row: Row, hi: f64) -> usize {
        self.add_range(row, f64::NEG_INFINITY, hi)
    }

    pub fn add_greater_equal(&mut self, row: Row, lo: f64) -> usize {
        self.add_range(row, lo, f64::INFINITY)
    }

    pub fn has_concave_terms(&self) -> bool {
        self.concave.iter().any(Option::is_some)
    }

    /// Objective without tie-break terms.
    pub fn objective(&self, x: &[f64]) -> f64 {
        (0..self.num_variables())
            .map(|j| {
                let u = self.concave[j].map_or(0.0, |u| u.value_unchecked(x[j]));
                self.cost[j] * x[j] - u
            })
            .sum()
    }

    fn gradient(&self, j: usize, x: f64) -> f64 {
        let g = self.concave[j].map_or(0.0, |u| u.marginal_unchecked(x));
        self.cost[j] + self.tie_break[j] * x - g
    }

    pub fn row_value(row: &Row, x: &[f64]) -> f64 {
        row.iter().map(|&(j, a)| a * x[j]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_variables();
        let bad = |msg: String| Err(Error::Malformed(msg));
        for j in 0..n {
            let (l, u) = (self.lower[j], self.upper[j]);
            if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return bad(format!("variable {j} has invalid bounds [{l}, {u}]"));
            }
            if !self.cost[j].is_finite() || !(self.tie_break[j] >= 0.0) {
                return bad(format!("variable {j} has a non-finite cost or negative tie-break"));
            }
            if let Some(util) = self.concave[j] {
                if !(l > util.domain_floor()) {
                    return bad(format!(
                        "variable {j} carries a utility but its lower bound {l} is outside the utility domain"
                    ));
                }
            }
        }
        let check_row = |kind: &str, i: usize, row: &Row| -> Result<()> {
            for &(j, a) in row {
                if j >= n {
                    return bad(format!("{kind} row {i} references variable {j} of {n}"));
                }
                if !a.is_finite() {
                    return bad(format!("{kind} row {i} has a non-finite coefficient"));
                }
            }
            Ok(())
        };
        for (i, row) in self.eq_rows.iter().enumerate() {
            check_row("equality", i, row)?;
            if !self.eq_rhs[i].is_finite() {
                return bad(format!("equality row {i} has a non-finite right-hand side"));
            }
        }
        for (i, row) in self.range_rows.iter().enumerate() {
            check_row("range", i, row)?;
            let (lo, hi) = (self.range_lo[i], self.range_hi[i]);
            if lo.is_nan() || hi.is_nan() || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return bad(format!("range row {i} has invalid limits [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// One dual per equality row.
    pub eq_duals: Vec<f64>,
    /// One signed dual per range row; positive when the upper side binds.
    pub range_duals: Vec<f64>,
    /// One signed dual per variable; positive when the upper bound binds.
    pub bound_duals: Vec<f64>,
    /// Objective at `x`, excluding tie-break terms.
    pub objective: f64,
    /// Difference between the (regularized) primal objective and the Lagrangian at the returned point.
    pub duality_gap: f64,
    /// Max over stationarity, primal feasibility and complementary slackness.
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Returns `self` if optimal, otherwise a solver error naming `context`.
    pub fn require_optimal(self, context: impl Into<String>) -> Result<Self> {
        if self.is_optimal() {
            Ok(self)
        } else {
            Err(Error::Solver {
                status: self.status,
                context: context.into(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Residual at which the interior-point loop stops early.
    pub target_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            target_tol: 1e-13,
        }
    }
}

pub fn solve_concave_program(p: &ConcaveProgram) -> Result<SolveResult> {
    solve_with_options(p, &SolverOptions::default())
}

/// Same as [`solve_concave_program`] but rejects programs with utilities.
pub fn solve_linear_program(p: &ConcaveProgram) -> Result<SolveResult> {
    if p.has_concave_terms() {
        return Err(Error::Malformed("linear program contains concave terms".into()));
    }
    solve_with_options(p, &SolverOptions::default())
}

pub fn solve_with_options(p: &ConcaveProgram, opts: &SolverOptions) -> Result<SolveResult> {
    p.validate()?;
    let reduced = match presolve::presolve(p) {
        presolve::Outcome::Infeasible => return Ok(infeasible_result(p)),
        presolve::Outcome::Reduced(r) => r,
    };
    let inner = ipm::solve(&reduced.problem, opts);
    let (x, eq_duals, range_duals, bound_duals) = reduced.restore(p, &inner);
    let mut result = SolveResult {
        status: inner.status,
        objective: p.objective(&x),
        x,
        eq_duals,
        range_duals,
        bound_duals,
        duality_gap: 0.0,
        kkt_residual: 0.0,
        iterations: inner.iterations,
    };
    let (kkt, gap) = kkt_report(p, &result);
    result.kkt_residual = kkt;
    result.duality_gap = gap;
    if result.status == SolveStatus::Optimal && kkt > OPTIMALITY_TOL {
        log::debug!("solver stopped with KKT residual {kkt:e}; reporting iteration limit");
        result.status = SolveStatus::IterationLimit;
    }
    Ok(result)
}

fn infeasible_result(p: &ConcaveProgram) -> SolveResult {
    SolveResult {
        status: SolveStatus::Infeasible,
        x: vec![f64::NAN; p.num_variables()],
        eq_duals: vec![0.0; p.num_equalities()],
        range_duals: vec![0.0; p.num_ranges()],
        bound_duals: vec![0.0; p.num_variables()],
        objective: f64::NAN,
        duality_gap: f64::NAN,
        kkt_residual: f64::INFINITY,
        iterations: 0,
    }
}

fn split(dual: f64) -> (f64, f64) {
    (dual.max(0.0), (-dual).max(0.0))
}

/// `(upper multiplier)·(hi − v) + (lower multiplier)·(v − lo)`, skipping
/// infinite sides whose multiplier is zero.
fn complementarity(dual: f64, value: f64, lo: f64, hi: f64) -> (f64, f64) {
    let (up, down) = split(dual);
    let mut worst = 0.0f64;
    let mut sum = 0.0;
    // A multiplier on an infinite side is a dual-feasibility violation of its own size.
    for (mult, slack) in [(up, hi - value), (down, value - lo)] {
        if mult == 0.0 {
            continue;
        }
        if slack.is_finite() {
            worst = worst.max((mult * slack).abs());
            sum += mult * slack;
        } else {
            worst = worst.max(mult);
        }
    }
    (worst, sum)
}

/// KKT residual and duality gap of a candidate primal-dual point.
pub fn kkt_report(p: &ConcaveProgram, r: &SolveResult) -> (f64, f64) {
    let n = p.num_variables();
    let x = &r.x;
    if x.iter().any(|v| !v.is_finite()) {
        return (f64::INFINITY, f64::NAN);
    }
    let mut stationarity: Vec<f64> = (0..n).map(|j| p.gradient(j, x[j]) + r.bound_duals[j]).collect();
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    // Lagrangian minus objective.
    let mut lagrange_terms = 0.0;
    for (i, row) in p.eq_rows.iter().enumerate() {
        for &(j, a) in row {
            stationarity[j] += a * r.eq_duals[i];
        }
        let resid = ConcaveProgram::row_value(row, x) - p.eq_rhs[i];
        primal = primal.max(resid.abs());
        lagrange_terms += r.eq_duals[i] * resid;
    }
    for (i, row) in p.range_rows.iter().enumerate() {
        for &(j, a) in row {
            stationarity[j] += a * r.range_duals[i];
        }
        let v = ConcaveProgram::row_value(row, x);
        let (lo, hi) = (p.range_lo[i], p.range_hi[i]);
        primal = primal.max(lo - v).max(v - hi);
        let (worst, sum) = complementarity(r.range_duals[i], v, lo, hi);
        comp = comp.max(worst);
        lagrange_terms -= sum;
    }
    for j in 0..n {
        let (l, u) = (p.lower[j], p.upper[j]);
        primal = primal.max(l - x[j]).max(x[j] - u);
        let (worst, sum) = complementarity(r.bound_duals[j], x[j], l, u);
        comp = comp.max(worst);
        lagrange_terms -= sum;
    }
    let stat = stationarity.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (stat.max(primal).max(comp), -lagrange_terms)
}
