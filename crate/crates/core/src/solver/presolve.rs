//! Removes fixed variables and trivial rows, and maps solutions back.

use super::ipm::{Inner, Problem};
use super::{ConcaveProgram, Row};

/// Rows whose residual after fixing variables is below this are satisfied.
const FEAS_TOL: f64 = 1e-9;

/// A finite interval too narrow for interior iterates.
fn is_degenerate(lo: f64, hi: f64) -> bool {
    lo.is_finite() && hi.is_finite() && hi - lo <= 1e-10 * (1.0 + lo.abs())
}

pub(super) enum Outcome {
    Reduced(Box<Reduced>),
    Infeasible,
}

enum RangeMap {
    Dropped,
    Equality(usize),
    Slack(usize),
}

pub(super) struct Reduced {
    pub problem: Problem,
    /// Reduced index of each original variable, or its fixed value.
    vars: Vec<Result<usize, f64>>,
    eqs: Vec<Option<usize>>,
    ranges: Vec<RangeMap>,
}

pub(super) fn presolve(p: &ConcaveProgram) -> Outcome {
    let n = p.num_variables();
    let mut vars = Vec::with_capacity(n);
    let mut prob = Problem::default();
    for j in 0..n {
        let (l, u) = (p.lower[j], p.upper[j]);
        if l > u + FEAS_TOL {
            return Outcome::Infeasible;
        }
        if is_degenerate(l, u) {
            vars.push(Err(0.5 * (l + u)));
        } else {
            vars.push(Ok(prob.push_var(l, u, p.cost[j], p.tie_break[j], p.concave[j])));
        }
    }

    // Substitutes fixed variables; returns the reduced row and the constant part.
    let reduce = |row: &Row| -> (Row, f64) {
        let mut out = Row::new();
        let mut constant = 0.0;
        for &(j, a) in row {
            match vars[j] {
                Ok(r) => match out.iter_mut().find(|(k, _)| *k == r) {
                    Some(entry) => entry.1 += a,
                    None => out.push((r, a)),
                },
                Err(v) => constant += a * v,
            }
        }
        out.retain(|&(_, a)| a != 0.0);
        (out, constant)
    };

    let mut eqs = Vec::with_capacity(p.eq_rows.len());
    for (row, &rhs) in p.eq_rows.iter().zip(&p.eq_rhs) {
        let (r, c) = reduce(row);
        let rhs = rhs - c;
        if r.is_empty() {
            if rhs.abs() > FEAS_TOL * (1.0 + c.abs()) {
                return Outcome::Infeasible;
            }
            eqs.push(None);
        } else {
            eqs.push(Some(prob.push_row(r, rhs)));
        }
    }

    let mut ranges = Vec::with_capacity(p.range_rows.len());
    for (i, row) in p.range_rows.iter().enumerate() {
        let (r, c) = reduce(row);
        let (lo, hi) = (p.range_lo[i] - c, p.range_hi[i] - c);
        let tol = FEAS_TOL * (1.0 + c.abs());
        if lo > hi + tol {
            return Outcome::Infeasible;
        }
        if r.is_empty() {
            if lo > tol || hi < -tol {
                return Outcome::Infeasible;
            }
            ranges.push(RangeMap::Dropped);
        } else if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
            ranges.push(RangeMap::Dropped);
        } else if is_degenerate(lo, hi) {
            ranges.push(RangeMap::Equality(prob.push_row(r, 0.5 * (lo + hi))));
        } else {
            ranges.push(RangeMap::Slack(prob.push_slack_row(r, lo, hi)));
        }
    }

    Outcome::Reduced(Box::new(Reduced {
        problem: prob,
        vars,
        eqs,
        ranges,
    }))
}

impl Reduced {
    /// Maps an interior-point solution to `(x, eq duals, range duals, bound duals)`
    /// of the original program.
    pub fn restore(&self, p: &ConcaveProgram, inner: &Inner) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = self
            .vars
            .iter()
            .map(|v| match *v {
                Ok(r) => inner.x[r],
                Err(value) => value,
            })
            .collect();
        let eq_duals: Vec<f64> = self.eqs.iter().map(|m| m.map_or(0.0, |r| inner.y[r])).collect();
        let range_duals: Vec<f64> = self
            .ranges
            .iter()
            .map(|m| match *m {
                RangeMap::Dropped => 0.0,
                RangeMap::Equality(r) | RangeMap::Slack(r) => inner.y[r],
            })
            .collect();

        // Bound duals of fixed variables absorb the remaining stationarity residual.
        let mut bound_duals: Vec<f64> = self
            .vars
            .iter()
            .enumerate()
            .map(|(j, v)| match *v {
                Ok(r) => inner.zu[r] - inner.zl[r],
                Err(value) => -p.gradient(j, value),
            })
            .collect();
        let fixed = |j: usize| self.vars[j].is_err();
        for (row, &y) in p.eq_rows.iter().zip(&eq_duals) {
            for &(j, a) in row.iter().filter(|(j, _)| fixed(*j)) {
                bound_duals[j] -= a * y;
            }
        }
        for (row, &y) in p.range_rows.iter().zip(&range_duals) {
            for &(j, a) in row.iter().filter(|(j, _)| fixed(*j)) {
                bound_duals[j] -= a * y;
            }
        }
        (x, eq_duals, range_duals, bound_duals)
    }
}
