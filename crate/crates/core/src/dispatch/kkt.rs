//! Residuals of the optimality identities satisfied by a centralized dispatch.

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::model::extended_view;
use super::{battery_violation, DispatchSolution, Scenario};

/// Largest absolute residual of each identity; all are zero at an exact optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `π_t = g(d_t) + λ^{d−}_t` for every agent and period.
    pub consumer_stationarity: f64,
    /// Same identity restricted to strictly positive consumption.
    pub consumer_stationarity_interior: f64,
    /// `π_t = λ^s_t`.
    pub solar_stationarity: f64,
    /// Battery stationarity in the form matching the battery representation.
    pub battery_stationarity: f64,
    /// One-step price evolution through battery duals.
    pub price_dynamics: f64,
    pub power_balance: f64,
    /// Largest violation of a battery limit.
    pub battery_violation: f64,
    /// Largest unused solar capacity in periods with positive marginal utility somewhere.
    pub full_solar: f64,
    pub min_price: f64,
    pub duality_gap: f64,
}

impl KktReport {
    /// Whether every stationarity, balance and gap residual is within `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        [
            self.consumer_stationarity,
            self.solar_stationarity,
            self.battery_stationarity,
            self.price_dynamics,
            self.power_balance,
            self.battery_violation,
            self.duality_gap,
        ]
        .iter()
        .all(|&r| r <= tol)
    }
}

fn track(worst: &mut f64, r: f64) {
    *worst = worst.max(r.abs());
}

/// Recomputes every identity from the primal and dual values in `sol`.
pub fn verify_kkt(sc: &Scenario, sol: &DispatchSolution) -> Result<KktReport> {
    sc.validate()?;
    let horizon = sc.horizon;
    let price = &sol.price;
    let w = sol.tie_break;
    let mut rep = KktReport {
        consumer_stationarity: 0.0,
        consumer_stationarity_interior: 0.0,
        solar_stationarity: 0.0,
        battery_stationarity: 0.0,
        price_dynamics: 0.0,
        power_balance: sol.balance_residuals().iter().fold(0.0f64, |m, r| m.max(r.abs())),
        battery_violation: battery_violation(sc, sol),
        full_solar: 0.0,
        min_price: price.iter().copied().fold(f64::INFINITY, f64::min),
        duality_gap: sol.duality_gap.abs(),
    };
    for (a, spec) in sol.agents.iter().zip(&sc.agents) {
        for t in 0..horizon {
            let g = spec.utility[t].marginal_unchecked(a.demand[t]);
            let r = price[t] - g - a.demand_duals[t];
            track(&mut rep.consumer_stationarity, r);
            if a.demand[t] > 1e-9 {
                track(&mut rep.consumer_stationarity_interior, r);
            }
            track(&mut rep.solar_stationarity, price[t] - a.solar_duals[t]);
        }
        let (Some(bd), Some(model)) = (&a.battery, &spec.battery) else {
            continue;
        };
        let dt = sc.dt;
        let lc = &bd.energy_duals;
        if !sol.split_batteries {
            let p = bd.net();
            let lb = &bd.discharge_duals;
            let mut tail = 0.0;
            for t in (0..horizon).rev() {
                tail += lc[t];
                track(&mut rep.battery_stationarity, price[t] - lb[t] + dt * tail - w * p[t]);
            }
            for t in 0..horizon.saturating_sub(1) {
                let r = (price[t + 1] - price[t]) - (lb[t + 1] - lb[t] + dt * lc[t] + w * (p[t + 1] - p[t]));
                track(&mut rep.price_dynamics, r);
            }
        } else {
            let b = extended_view(model);
            let (k, sm, th) = (b.discharge_factor(), b.sigma_minus, b.theta);
            let (pd, pc) = (&bd.discharge, &bd.charge);
            let (ld, lm) = (&bd.discharge_duals, &bd.charge_duals);
            // tail_t = Σ_{τ≥t} θ^{τ−t} λᶜ_τ
            let mut tail = 0.0;
            for t in (0..horizon).rev() {
                tail = lc[t] + th * tail;
                track(
                    &mut rep.battery_stationarity,
                    price[t] - ld[t] + dt * k * tail - w * pd[t],
                );
                track(
                    &mut rep.battery_stationarity,
                    price[t] + lm[t] + dt * sm * tail + w * pc[t],
                );
            }
            for t in 0..horizon.saturating_sub(1) {
                let lhs = th * price[t + 1] - price[t];
                let r_dis = lhs - (th * ld[t + 1] - ld[t] + dt * k * lc[t] + w * (th * pd[t + 1] - pd[t]));
                let r_chg = lhs - (lm[t] - th * lm[t + 1] + dt * sm * lc[t] - w * (th * pc[t + 1] - pc[t]));
                track(&mut rep.price_dynamics, r_dis);
                track(&mut rep.price_dynamics, r_chg);
            }
        }
    }
    // Marginal utility is positive everywhere, so solar must run at capacity.
    let positive_marginal = sc
        .agents
        .iter()
        .zip(&sol.agents)
        .any(|(spec, a)| (0..horizon).any(|t| spec.utility[t].marginal_unchecked(a.demand[t]) > 0.0));
    if positive_marginal {
        for (a, spec) in sol.agents.iter().zip(&sc.agents) {
            for t in 0..horizon {
                track(&mut rep.full_solar, spec.solar[t] - a.solar[t]);
            }
        }
    }
    Ok(rep)
}
