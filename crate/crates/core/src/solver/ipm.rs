//! Mehrotra predictor-corrector interior-point method.
//!
//! Range rows arrive as equalities `g·x − w = 0` with bounds on the slack
//! `w`, so the barrier Hessian stays diagonal and each iteration solves the
//! normal equations `A K⁻¹ Aᵀ dy = r` with a dense Cholesky factorization.

use nalgebra::{DMatrix, DVector};

use super::{Row, SolveStatus, SolverOptions, OPTIMALITY_TOL};
use crate::utility::QuasiCpeUtility;

/// Iterations without a 2x improvement before the loop gives up.
const STAGNATION_WINDOW: usize = 30;
/// Dual magnitude treated as divergence.
const DIVERGENCE: f64 = 1e13;
const KKT_ACCEPT: f64 = 0.9;

#[derive(Debug, Default)]
pub(super) struct Problem {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    tie: Vec<f64>,
    concave: Vec<Option<QuasiCpeUtility>>,
    /// Row whose slack this variable is.
    slack_of: Vec<Option<usize>>,
    rows: Vec<Row>,
    rhs: Vec<f64>,
}

impl Problem {
    pub fn push_var(&mut self, lower: f64, upper: f64, cost: f64, tie: f64, concave: Option<QuasiCpeUtility>) -> usize {
        self.lower.push(lower);
        self.upper.push(upper);
        self.cost.push(cost);
        self.tie.push(tie);
        self.concave.push(concave);
        self.slack_of.push(None);
        self.lower.len() - 1
    }

    pub fn push_row(&mut self, row: Row, rhs: f64) -> usize {
        self.rows.push(row);
        self.rhs.push(rhs);
        self.rows.len() - 1
    }

    /// Adds `lo ≤ row·x ≤ hi` as `row·x − w = 0`, `w ∈ [lo, hi]`.
    pub fn push_slack_row(&mut self, mut row: Row, lo: f64, hi: f64) -> usize {
        let w = self.push_var(lo, hi, 0.0, 0.0, None);
        let r = self.rows.len();
        self.slack_of[w] = Some(r);
        row.push((w, -1.0));
        self.push_row(row, 0.0)
    }

    fn is_nonlinear(&self) -> bool {
        self.concave.iter().any(Option::is_some) || self.tie.iter().any(|&t| t != 0.0)
    }

    fn gradient(&self, j: usize, x: f64) -> f64 {
        let g = self.concave[j].map_or(0.0, |u| u.marginal_unchecked(x));
        self.cost[j] + self.tie[j] * x - g
    }

    fn value(&self, j: usize, x: f64) -> f64 {
        let u = self.concave[j].map_or(0.0, |u| u.value_unchecked(x));
        self.cost[j] * x + 0.5 * self.tie[j] * x * x - u
    }

    fn hessian(&self, j: usize, x: f64) -> f64 {
        let h = self.concave[j].map_or(0.0, |u| -u.marginal_slope_unchecked(x));
        self.tie[j] + h
    }
}

pub(super) struct Inner {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub zl: Vec<f64>,
    pub zu: Vec<f64>,
    pub iterations: usize,
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dzl: Vec<f64>,
    dzu: Vec<f64>,
}

#[derive(Clone)]
struct State<'a> {
    p: &'a Problem,
    cols: Vec<Vec<(usize, f64)>>,
    has_l: Vec<bool>,
    has_u: Vec<bool>,
    x: Vec<f64>,
    y: Vec<f64>,
    zl: Vec<f64>,
    zu: Vec<f64>,
}

fn interior_start(l: f64, u: f64, hint: Option<f64>) -> f64 {
    match (l.is_finite(), u.is_finite()) {
        (true, true) => {
            let margin = 0.1 * (u - l);
            hint.map_or(0.5 * (l + u), |h| h.clamp(l + margin, u - margin))
        }
        (true, false) => hint.map_or(l + 1.0, |h| h.max(l + 1.0)),
        (false, true) => hint.map_or(u - 1.0, |h| h.min(u - 1.0)),
        (false, false) => hint.unwrap_or(0.0),
    }
}

impl<'a> State<'a> {
    fn new(p: &'a Problem) -> Self {
        let n = p.lower.len();
        let mut cols = vec![Vec::new(); n];
        for (i, row) in p.rows.iter().enumerate() {
            for &(j, a) in row {
                cols[j].push((i, a));
            }
        }
        let has_l: Vec<bool> = p.lower.iter().map(|l| l.is_finite()).collect();
        let has_u: Vec<bool> = p.upper.iter().map(|u| u.is_finite()).collect();
        let mut x = vec![0.0; n];
        for j in 0..n {
            if p.slack_of[j].is_none() {
                x[j] = interior_start(p.lower[j], p.upper[j], None);
            }
        }
        for j in 0..n {
            if let Some(r) = p.slack_of[j] {
                let v: f64 = p.rows[r].iter().filter(|&&(k, _)| k != j).map(|&(k, a)| a * x[k]).sum();
                x[j] = interior_start(p.lower[j], p.upper[j], Some(v));
            }
        }
        let zl = has_l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let zu = has_u.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        State {
            p,
            cols,
            has_l,
            has_u,
            x,
            y: vec![0.0; p.rows.len()],
            zl,
            zu,
        }
    }

    fn slacks(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.p;
        let sl = (0..self.x.len())
            .map(|j| if self.has_l[j] { self.x[j] - p.lower[j] } else { 1.0 })
            .collect();
        let su = (0..self.x.len())
            .map(|j| if self.has_u[j] { p.upper[j] - self.x[j] } else { 1.0 })
            .collect();
        (sl, su)
    }

    fn dual_residual(&self) -> Vec<f64> {
        (0..self.x.len())
            .map(|j| {
                let aty: f64 = self.cols[j].iter().map(|&(i, a)| a * self.y[i]).sum();
                self.p.gradient(j, self.x[j]) + aty - self.zl[j] + self.zu[j]
            })
            .collect()
    }

    fn primal_residual(&self) -> Vec<f64> {
        self.p
            .rows
            .iter()
            .zip(&self.p.rhs)
            .map(|(row, b)| row.iter().map(|&(j, a)| a * self.x[j]).sum::<f64>() - b)
            .collect()
    }

    /// Sum of complementarity products, their count and the largest one.
    fn complementarity(&self, sl: &[f64], su: &[f64]) -> (f64, usize, f64) {
        let mut sum = 0.0;
        let mut count = 0;
        let mut worst = 0.0f64;
        for j in 0..self.x.len() {
            if self.has_l[j] {
                sum += sl[j] * self.zl[j];
                worst = worst.max(sl[j] * self.zl[j]);
                count += 1;
            }
            if self.has_u[j] {
                sum += su[j] * self.zu[j];
                worst = worst.max(su[j] * self.zu[j]);
                count += 1;
            }
        }
        (sum, count, worst)
    }

    fn stepped(&self, d: &Direction, ap: f64, ad: f64) -> Self {
        let p = self.p;
        let mut next = self.clone();
        for j in 0..next.x.len() {
            next.x[j] += ap * d.dx[j];
            if next.has_l[j] {
                next.zl[j] += ad * d.dzl[j];
                let floor = f64::EPSILON * (1.0 + p.lower[j].abs());
                if next.x[j] - p.lower[j] < floor {
                    next.x[j] = p.lower[j] + floor;
                }
            }
            if next.has_u[j] {
                next.zu[j] += ad * d.dzu[j];
                let floor = f64::EPSILON * (1.0 + p.upper[j].abs());
                if p.upper[j] - next.x[j] < floor {
                    next.x[j] = p.upper[j] - floor;
                }
            }
        }
        for (y, dy) in next.y.iter_mut().zip(&d.dy) {
            *y += ad * dy;
        }
        next
    }

    fn kkt(&self) -> f64 {
        let (sl, su) = self.slacks();
        let worst = self.complementarity(&sl, &su).2;
        inf_norm(&self.dual_residual())
            .max(inf_norm(&self.primal_residual()))
            .max(worst)
    }

    /// `f(x) − μ·Σ ln(slack) + ν·‖Ax − b‖₁`.
    fn barrier_merit(&self, mu: f64, penalty: f64) -> f64 {
        let p = self.p;
        let (sl, su) = self.slacks();
        let mut total = 0.0;
        for j in 0..self.x.len() {
            total += p.value(j, self.x[j]);
            if self.has_l[j] {
                total -= mu * sl[j].ln();
            }
            if self.has_u[j] {
                total -= mu * su[j].ln();
            }
        }
        total + penalty * self.primal_residual().iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Directional derivative of the merit along a step that satisfies `A dx = −r_p`.
    fn merit_slope(&self, dx: &[f64], mu: f64, penalty: f64, primal_l1: f64) -> f64 {
        let p = self.p;
        let (sl, su) = self.slacks();
        let mut slope = -penalty * primal_l1;
        for j in 0..self.x.len() {
            let mut g = p.gradient(j, self.x[j]);
            if self.has_l[j] {
                g -= mu / sl[j];
            }
            if self.has_u[j] {
                g += mu / su[j];
            }
            slope += g * dx[j];
        }
        slope
    }

    /// Keeps each bound dual within a fixed factor of its central value `μ/slack`.
    fn safeguard_duals(&mut self) {
        const KAPPA: f64 = 1e10;
        let (sl, su) = self.slacks();
        let (sum, count, _) = self.complementarity(&sl, &su);
        if count == 0 || sum <= 0.0 {
            return;
        }
        let mu = sum / count as f64;
        for j in 0..self.x.len() {
            if self.has_l[j] {
                self.zl[j] = self.zl[j].clamp(mu / (KAPPA * sl[j]), KAPPA * mu / sl[j]);
            }
            if self.has_u[j] {
                self.zu[j] = self.zu[j].clamp(mu / (KAPPA * su[j]), KAPPA * mu / su[j]);
            }
        }
    }

    fn normal_matrix(&self, kinv: &[f64]) -> DMatrix<f64> {
        let m = self.p.rows.len();
        let mut s = DMatrix::zeros(m, m);
        for (j, col) in self.cols.iter().enumerate() {
            for &(i, a) in col {
                let ai = a * kinv[j];
                for &(k, b) in col {
                    s[(i, k)] += ai * b;
                }
            }
        }
        s
    }
}

/// Dense Cholesky of `S + reg·I` with iterative refinement against `S`.
struct NormalSolver {
    s: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl NormalSolver {
    fn new(s: DMatrix<f64>) -> Option<Self> {
        let m = s.nrows();
        let scale = (0..m).fold(0.0f64, |acc, i| acc.max(s[(i, i)])).max(1e-300);
        let mut reg = 1e-14 * scale;
        for _ in 0..12 {
            let mut reg_s = s.clone();
            for i in 0..m {
                reg_s[(i, i)] += reg;
            }
            if let Some(chol) = reg_s.cholesky() {
                return Some(Self { s, chol });
            }
            reg *= 100.0;
        }
        None
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(rhs);
        let mut sol = self.chol.solve(&b);
        for _ in 0..2 {
            let resid = &b - &self.s * &sol;
            sol += self.chol.solve(&resid);
        }
        sol.iter().copied().collect()
    }
}

fn max_step(v: &[f64], dv: &[f64], active: &[bool], tau: f64) -> f64 {
    let mut alpha = 1.0f64;
    for j in 0..v.len() {
        if active[j] && dv[j] < 0.0 {
            alpha = alpha.min(-tau * v[j] / dv[j]);
        }
    }
    alpha
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(super) fn solve(p: &Problem, opts: &SolverOptions) -> Inner {
    let mut st = State::new(p);
    let n = st.x.len();
    let nonlinear = p.is_nonlinear();
    let mut history: Vec<f64> = Vec::new();
    let mut status = SolveStatus::IterationLimit;
    let mut iterations = 0;
    let mut penalty = 1.0f64;

    for iter in 0..opts.max_iters {
        iterations = iter;
        let (sl, su) = st.slacks();
        let r_d = st.dual_residual();
        let r_p = st.primal_residual();
        let (comp_sum, comp_count, comp_worst) = st.complementarity(&sl, &su);
        let mu = if comp_count > 0 {
            comp_sum / comp_count as f64
        } else {
            0.0
        };
        let primal_norm = inf_norm(&r_p);
        let primal_l1: f64 = r_p.iter().map(|v| v.abs()).sum();
        let kkt = inf_norm(&r_d).max(primal_norm).max(comp_worst);
        history.push(kkt);
        log::trace!("iteration {iter}: kkt {kkt:e}, primal {primal_norm:e}, mu {mu:e}");
        if kkt <= opts.target_tol {
            status = SolveStatus::Optimal;
            break;
        }
        // Near-optimal points that stop improving have hit rounding noise.
        if iter >= 3 && kkt <= 1e-2 * OPTIMALITY_TOL && history[iter - 3..iter].iter().all(|&h| kkt > 0.5 * h) {
            status = SolveStatus::Optimal;
            break;
        }
        let dual_size = inf_norm(&st.y).max(inf_norm(&st.zl)).max(inf_norm(&st.zu));
        if dual_size > DIVERGENCE && primal_norm > OPTIMALITY_TOL {
            status = SolveStatus::Infeasible;
            break;
        }
        if iter >= STAGNATION_WINDOW && kkt > 0.5 * history[iter - STAGNATION_WINDOW] {
            status = if kkt <= OPTIMALITY_TOL {
                SolveStatus::Optimal
            } else if primal_norm > OPTIMALITY_TOL {
                SolveStatus::Infeasible
            } else {
                SolveStatus::IterationLimit
            };
            break;
        }

        let kdiag: Vec<f64> = (0..n)
            .map(|j| {
                let mut k = p.hessian(j, st.x[j]);
                if st.has_l[j] {
                    k += st.zl[j] / sl[j];
                }
                if st.has_u[j] {
                    k += st.zu[j] / su[j];
                }
                k.max(1e-12)
            })
            .collect();
        let kinv: Vec<f64> = kdiag.iter().map(|k| 1.0 / k).collect();
        let Some(normal) = NormalSolver::new(st.normal_matrix(&kinv)) else {
            log::debug!("normal equations could not be factorized at iteration {iter}");
            break;
        };

        let direction = |t_l: &[f64], t_u: &[f64]| -> Direction {
            let r_tilde: Vec<f64> = (0..n)
                .map(|j| {
                    let mut r = -r_d[j];
                    if st.has_l[j] {
                        r += t_l[j] / sl[j];
                    }
                    if st.has_u[j] {
                        r -= t_u[j] / su[j];
                    }
                    r
                })
                .collect();
            let mut rhs = r_p.clone();
            for (j, col) in st.cols.iter().enumerate() {
                for &(i, a) in col {
                    rhs[i] += a * kinv[j] * r_tilde[j];
                }
            }
            let dy = normal.solve(&rhs);
            let dx: Vec<f64> = (0..n)
                .map(|j| {
                    let aty: f64 = st.cols[j].iter().map(|&(i, a)| a * dy[i]).sum();
                    kinv[j] * (r_tilde[j] - aty)
                })
                .collect();
            let dzl = (0..n)
                .map(|j| {
                    if st.has_l[j] {
                        (t_l[j] - st.zl[j] * dx[j]) / sl[j]
                    } else {
                        0.0
                    }
                })
                .collect();
            let dzu = (0..n)
                .map(|j| {
                    if st.has_u[j] {
                        (t_u[j] + st.zu[j] * dx[j]) / su[j]
                    } else {
                        0.0
                    }
                })
                .collect();
            Direction { dx, dy, dzl, dzu }
        };

        let neg = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| -x).collect() };
        let steps = |d: &Direction, tau: f64| -> (f64, f64) {
            let a_p = max_step(&sl, &d.dx, &st.has_l, tau).min(max_step(&su, &neg(&d.dx), &st.has_u, tau));
            let a_d = max_step(&st.zl, &d.dzl, &st.has_l, tau).min(max_step(&st.zu, &d.dzu, &st.has_u, tau));
            if nonlinear {
                let a = a_p.min(a_d);
                (a, a)
            } else {
                (a_p, a_d)
            }
        };

        // Predictor.
        let t_l0: Vec<f64> = (0..n).map(|j| -sl[j] * st.zl[j]).collect();
        let t_u0: Vec<f64> = (0..n).map(|j| -su[j] * st.zu[j]).collect();
        let aff = direction(&t_l0, &t_u0);
        let mut sigma = 0.0;
        let dir = if comp_count > 0 {
            let (ap, ad) = steps(&aff, 1.0);
            let mut mu_aff = 0.0;
            for j in 0..n {
                if st.has_l[j] {
                    mu_aff += (sl[j] + ap * aff.dx[j]) * (st.zl[j] + ad * aff.dzl[j]);
                }
                if st.has_u[j] {
                    mu_aff += (su[j] - ap * aff.dx[j]) * (st.zu[j] + ad * aff.dzu[j]);
                }
            }
            mu_aff /= comp_count as f64;
            sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let t_l: Vec<f64> = (0..n)
                .map(|j| sigma * mu - sl[j] * st.zl[j] - aff.dx[j] * aff.dzl[j])
                .collect();
            let t_u: Vec<f64> = (0..n)
                .map(|j| sigma * mu - su[j] * st.zu[j] + aff.dx[j] * aff.dzu[j])
                .collect();
            direction(&t_l, &t_u)
        } else {
            aff
        };
        if dir.dx.iter().chain(&dir.dy).any(|v| !v.is_finite()) {
            log::debug!("non-finite search direction at iteration {iter}");
            break;
        }

        let tau = (1.0 - mu).clamp(0.99, 0.99999);
        let (ap, ad) = steps(&dir, tau);
        if !nonlinear {
            st = st.stepped(&dir, ap, ad);
        } else {
            // Armijo backtracking on the barrier merit; fall back to the pure
            // Newton direction when the corrector is not a descent direction.
            let mu_t = sigma * mu;
            let mut accepted = None;
            for candidate in [Some((dir, ap)), None] {
                let (d, a0) = match candidate {
                    Some(c) => c,
                    None => {
                        let t_l: Vec<f64> = (0..n).map(|j| mu_t - sl[j] * st.zl[j]).collect();
                        let t_u: Vec<f64> = (0..n).map(|j| mu_t - su[j] * st.zu[j]).collect();
                        let d = direction(&t_l, &t_u);
                        let a = steps(&d, tau).0;
                        (d, a)
                    }
                };
                penalty =
                    penalty.max(inf_norm(&st.y.iter().zip(&d.dy).map(|(y, dy)| y + dy).collect::<Vec<_>>()) + 1.0);
                // A step that shrinks the whole residual is taken without consulting the merit.
                let full = st.stepped(&d, a0, a0);
                if full.kkt() <= KKT_ACCEPT * kkt {
                    accepted = Some(full);
                    break;
                }
                let phi0 = st.barrier_merit(mu_t, penalty);
                let slope = st.merit_slope(&d.dx, mu_t, penalty, primal_l1);
                if !(slope < 0.0) {
                    // A vanishing primal step leaves the merit unchanged; take the dual step.
                    if inf_norm(&d.dx) <= 1e-12 * (1.0 + inf_norm(&st.x)) {
                        accepted = Some(st.stepped(&d, a0, a0));
                        break;
                    }
                    continue;
                }
                let mut a = a0;
                while a > 1e-14 {
                    let next = st.stepped(&d, a, a);
                    // The last term absorbs rounding in the merit near convergence.
                    let allowance = 1e-4 * a * slope + 1e-13 * phi0.abs().max(1.0);
                    if next.barrier_merit(mu_t, penalty) <= phi0 + allowance {
                        accepted = Some(next);
                        break;
                    }
                    a *= 0.5;
                }
                if accepted.is_some() {
                    break;
                }
            }
            match accepted {
                Some(mut next) => {
                    next.safeguard_duals();
                    st = next;
                }
                None => {
                    log::debug!("line search failed at iteration {iter}");
                    break;
                }
            }
        }
        iterations = iter + 1;
    }
    // An early exit from a point already within tolerance is a success; the
    // caller re-verifies optimality on the original problem.
    if status == SolveStatus::IterationLimit
        && iterations < opts.max_iters
        && history.last().is_some_and(|&k| k <= OPTIMALITY_TOL)
    {
        status = SolveStatus::Optimal;
    }

    Inner {
        status,
        x: st.x,
        y: st.y,
        zl: st.zl,
        zu: st.zu,
        iterations,
    }
}
