//! The private decision problems of π-agents and q-agents.

use crate::dispatch::model::{add_agent, extended_view, AgentVars, Representation};
use crate::dispatch::{AgentSpec, BatteryModel};
use crate::error::Result;
use crate::solver::{solve_concave_program, solve_linear_program, ConcaveProgram, CANONICAL_TIE_BREAK};

/// Optimum of an agent's own utility maximization with a traded quantity `q`
/// received each period (negative when delivering).
#[derive(Debug, Clone)]
pub(crate) struct PrivateOptimum {
    pub q: Vec<f64>,
    pub demand: Vec<f64>,
    /// Dual of `d ≥ 0` per period, non-negative.
    pub demand_duals: Vec<f64>,
    /// `Σ U(d) − Σ π q`.
    pub value: f64,
}

fn representation(agent: &AgentSpec) -> Representation {
    match agent.battery {
        Some(BatteryModel::Extended(_)) => Representation::Split,
        _ => Representation::Native,
    }
}

/// Solves `max Σ U(d) − Σ π q` over the agent's own schedule with
/// `q_t ∈ [lo_t, hi_t]` and `d − p_s − p_b − q = 0`.
pub(crate) fn solve_private(agent: &AgentSpec, price: &[f64], q_bounds: &[(f64, f64)]) -> Result<PrivateOptimum> {
    let horizon = q_bounds.len();
    let mut p = ConcaveProgram::new();
    let vars: AgentVars = add_agent(&mut p, agent, horizon, representation(agent), CANONICAL_TIE_BREAK);
    let q: Vec<usize> = q_bounds
        .iter()
        .zip(price)
        .map(|(&(lo, hi), &pi)| p.add_variable(lo, hi, pi))
        .collect();
    for t in 0..horizon {
        let mut row = vars.net_supply(t);
        row.push((q[t], 1.0));
        p.add_equality(row, 0.0);
    }
    let r = solve_concave_program(&p)?;
    let r = r.require_optimal(format!("private problem of agent {}", agent.id))?;
    let qv: Vec<f64> = q.iter().map(|&j| r.x[j]).collect();
    let demand: Vec<f64> = vars.demand.iter().map(|&j| r.x[j].max(0.0)).collect();
    let value = (0..horizon)
        .map(|t| agent.utility[t].value_unchecked(demand[t]) - price[t] * qv[t])
        .sum();
    Ok(PrivateOptimum {
        demand_duals: vars.demand.iter().map(|&j| (-r.bound_duals[j]).max(0.0)).collect(),
        q: qv,
        demand,
        value,
    })
}

/// Slacks tried in turn on a fixed trade, on the side of receiving more, so
/// that quantities deliverable only up to rounding still leave an interior.
const FIXED_TRADE_SLACKS: [f64; 3] = [0.0, 1e-9, 1e-7];

/// Best value with the traded quantity fixed.
pub(crate) fn fixed_trade(agent: &AgentSpec, price: &[f64], q: &[f64]) -> Result<PrivateOptimum> {
    let mut last = None;
    for slack in FIXED_TRADE_SLACKS {
        let bounds: Vec<(f64, f64)> = q.iter().map(|&x| (x, x + slack * x.abs().max(1.0))).collect();
        match solve_private(agent, price, &bounds) {
            Ok(mut opt) => {
                // Charge the trade as offered, not as absorbed.
                opt.value += price
                    .iter()
                    .zip(opt.q.iter().zip(q))
                    .map(|(p, (a, b))| p * (a - b))
                    .sum::<f64>();
                opt.q = q.to_vec();
                return Ok(opt);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Whether `agent` can deliver `export_t` each period (negative means absorb),
/// up to `tol`. Keeping the battery as full as the export allows is optimal
/// for this test, so one greedy pass decides it.
pub(crate) fn can_deliver(agent: &AgentSpec, export: &[f64], tol: f64) -> bool {
    // The battery must supply at least r_t; any surplus is consumed.
    let need: Vec<f64> = export.iter().zip(&agent.solar).map(|(e, cap)| e - cap).collect();
    let Some(model) = &agent.battery else {
        return need.iter().all(|&r| r <= tol);
    };
    let b = extended_view(model);
    let k = b.discharge_factor();
    let mut s = b.s0;
    for &r in &need {
        let retained = b.theta * s;
        if r > 0.0 {
            if r > b.p_max_discharge + tol {
                return false;
            }
            s = retained - k * r * b.dt;
            if s < -tol {
                return false;
            }
        } else {
            let room = ((b.s_max - retained) / (b.sigma_minus * b.dt)).max(0.0);
            let charge = (-r).min(b.p_max_charge).min(room);
            s = retained + b.sigma_minus * charge * b.dt;
        }
    }
    b.terminal_soc_min.is_none_or(|m| s >= m - tol)
}

/// Tolerance used to certify that a projected quantity is deliverable.
pub(crate) const CERTIFY_TOL: f64 = 1e-10;

/// Smallest `β ∈ [0, 1]` such that the π-agent can deliver
/// `Σ_Y (β q̂ + (1−β) q) + Σ_X q★`, from the projection LP. `None` when the LP
/// does not solve, which happens when `q̂` is deliverable only up to rounding.
pub(crate) fn projection_lp(
    pi_agent: &AgentSpec,
    requested: &[f64],
    known: &[f64],
    settled: &[f64],
) -> Result<Option<f64>> {
    let horizon = requested.len();
    let mut p = ConcaveProgram::new();
    let vars = add_agent(&mut p, pi_agent, horizon, representation(pi_agent), 0.0);
    // Only feasibility matters here.
    for &d in &vars.demand {
        p.clear_concave(d);
    }
    let beta = p.add_variable(0.0, 1.0, 1.0);
    for t in 0..horizon {
        // d − p_s − p_b + β (q̂ − q) = −Σ_Y q − Σ_X q★
        let mut row: Vec<(usize, f64)> = vars.net_supply(t).into_iter().map(|(j, a)| (j, -a)).collect();
        row.push((beta, known[t] - requested[t]));
        p.add_equality(row, -requested[t] - settled[t]);
    }
    let r = solve_linear_program(&p)?;
    Ok(r.is_optimal().then(|| r.x[beta].clamp(0.0, 1.0)))
}
