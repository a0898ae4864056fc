//! Individual best responses to a broadcast price and the dual decomposition
//! of total welfare.

use serde::{Deserialize, Serialize};

use crate::battery::{ExtendedBattery, IdealBattery};
use crate::error::{Error, Result};
use crate::solver::{solve_linear_program, ConcaveProgram, SolveResult};
use crate::utility::QuasiCpeUtility;

use super::model::{add_battery, BatteryBlock, BatteryVars, Representation};
use super::{BatteryModel, Scenario};

/// Relative slack allowed on the objective when exploring the optimal face.
const FACE_TOL: f64 = 1e-9;

fn check_lengths(what: &str, a: usize, price: &[f64]) -> Result<()> {
    if a != price.len() {
        return Err(Error::domain(format!(
            "{what} has {a} periods but the price has {}",
            price.len()
        )));
    }
    if price.iter().any(|p| !p.is_finite()) {
        return Err(Error::domain("price must be finite"));
    }
    Ok(())
}

/// Utility-maximizing consumption `d_t = h(π_t)` per period.
pub fn best_response_consumer(utility: &[QuasiCpeUtility], price: &[f64]) -> Result<Vec<f64>> {
    check_lengths("utility sequence", utility.len(), price)?;
    utility.iter().zip(price).map(|(u, &pi)| u.inverse_demand(pi)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolarResponse {
    pub power: Vec<f64>,
    /// Periods with a negative price, where output is curtailed to zero.
    pub negative_price_periods: Vec<usize>,
}

/// Profit-maximizing solar output; a zero price keeps full output.
pub fn best_response_solar(capacity: &[f64], price: &[f64]) -> SolarResponse {
    let mut negative_price_periods = Vec::new();
    let power = capacity
        .iter()
        .zip(price)
        .enumerate()
        .map(|(t, (&cap, &pi))| {
            if pi < 0.0 {
                negative_price_periods.push(t);
                0.0
            } else {
                cap
            }
        })
        .collect();
    SolarResponse {
        power,
        negative_price_periods,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryResponse {
    /// Net discharge per period.
    pub power: Vec<f64>,
    /// `−Σ π_t p_t`.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedBatteryResponse {
    pub discharge: Vec<f64>,
    pub charge: Vec<f64>,
    pub soc: Vec<f64>,
    /// `−Σ π_t (p⁺_t − p⁻_t)`.
    pub objective: f64,
}

fn battery_lp(model: &BatteryModel, price: &[f64], repr: Representation) -> (ConcaveProgram, BatteryBlock) {
    let mut p = ConcaveProgram::new();
    let block = add_battery(&mut p, model, price.len(), repr, 0.0);
    match &block.vars {
        BatteryVars::Ideal { power } => {
            for (&v, &pi) in power.iter().zip(price) {
                p.set_cost(v, -pi);
            }
        }
        BatteryVars::Extended { discharge, charge } => {
            for t in 0..price.len() {
                p.set_cost(discharge[t], -price[t]);
                p.set_cost(charge[t], price[t]);
            }
        }
    }
    (p, block)
}

fn solve_lp(p: &ConcaveProgram, context: &str) -> Result<SolveResult> {
    solve_linear_program(p)?.require_optimal(context)
}

fn ideal_power(r: &SolveResult, block: &BatteryBlock) -> Vec<f64> {
    match &block.vars {
        BatteryVars::Ideal { power } => power.iter().map(|&j| r.x[j]).collect(),
        BatteryVars::Extended { .. } => unreachable!("ideal batteries use the native representation"),
    }
}

/// One optimal dispatch of the arbitrage LP `min −Σ π_t p_t` over the ideal battery's limits.
pub fn best_response_battery(b: &IdealBattery, price: &[f64]) -> Result<BatteryResponse> {
    b.validate()?;
    check_lengths("price", price.len(), price)?;
    let model = BatteryModel::Ideal(b.clone());
    let (p, block) = battery_lp(&model, price, Representation::Native);
    let r = solve_lp(&p, "battery best response")?;
    let power: Vec<f64> = ideal_power(&r, &block)
        .iter()
        .map(|x| x.clamp(-b.p_max, b.p_max))
        .collect();
    Ok(BatteryResponse {
        objective: IdealBattery::dispatch_cost(price, &power),
        power,
    })
}

/// Optimal dispatch of the non-ideal battery: the LP without complementarity is
/// solved and then repaired, which is exact for non-negative prices.
pub fn best_response_battery_ext(b: &ExtendedBattery, price: &[f64]) -> Result<ExtendedBatteryResponse> {
    b.validate()?;
    check_lengths("price", price.len(), price)?;
    if let Some(t) = price.iter().position(|&pi| pi < -1e-9) {
        return Err(Error::domain(format!(
            "negative price {} at period {t}; the relaxation is only exact for non-negative prices",
            price[t]
        )));
    }
    let model = BatteryModel::Extended(b.clone());
    let (p, block) = battery_lp(&model, price, Representation::Split);
    let r = solve_lp(&p, "extended battery best response")?;
    let BatteryVars::Extended { discharge, charge } = &block.vars else {
        unreachable!("split representation")
    };
    let dis: Vec<f64> = discharge
        .iter()
        .map(|&j| r.x[j].clamp(0.0, b.p_max_discharge))
        .collect();
    let chg: Vec<f64> = charge.iter().map(|&j| r.x[j].clamp(0.0, b.p_max_charge)).collect();
    let (discharge, charge) = b.repair_complementarity(&dis, &chg)?;
    let soc = b.soc_trajectory(&discharge, &charge)?;
    let objective = -price
        .iter()
        .zip(discharge.iter().zip(&charge))
        .map(|(pi, (d, c))| pi * (d - c))
        .sum::<f64>();
    Ok(ExtendedBatteryResponse {
        discharge,
        charge,
        soc,
        objective,
    })
}

/// An optimal ideal-battery dispatch that minimizes `sign · p_t`.
fn face_extreme(b: &IdealBattery, price: &[f64], optimum: f64, t: usize, sign: f64) -> Result<Vec<f64>> {
    let model = BatteryModel::Ideal(b.clone());
    let (mut p, block) = battery_lp(&model, price, Representation::Native);
    let power = match &block.vars {
        BatteryVars::Ideal { power } => power.clone(),
        BatteryVars::Extended { .. } => unreachable!("native representation"),
    };
    let row = power.iter().zip(price).map(|(&v, &pi)| (v, -pi)).collect();
    p.add_less_equal(row, optimum + FACE_TOL * (1.0 + optimum.abs()));
    for &v in &power {
        p.set_cost(v, 0.0);
    }
    p.set_cost(power[t], sign);
    let r = solve_lp(&p, "optimal face probe")?;
    Ok(ideal_power(&r, &block))
}

/// Smallest and largest net discharge in each period over the set of optimal
/// dispatches of the ideal battery LP.
pub fn battery_dispatch_range(b: &IdealBattery, price: &[f64]) -> Result<Vec<(f64, f64)>> {
    let best = best_response_battery(b, price)?;
    (0..price.len())
        .map(|t| {
            let lo = face_extreme(b, price, best.objective, t, 1.0)?[t];
            let hi = face_extreme(b, price, best.objective, t, -1.0)?[t];
            Ok((lo, hi))
        })
        .collect()
}

/// Two optimal ideal-battery dispatches that differ by more than `min_gap` in
/// some period, or `None` when the optimal dispatch is unique to that precision.
pub fn non_uniqueness_witness(b: &IdealBattery, price: &[f64], min_gap: f64) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let best = best_response_battery(b, price)?;
    for t in 0..price.len() {
        let lo = face_extreme(b, price, best.objective, t, 1.0)?;
        let hi = face_extreme(b, price, best.objective, t, -1.0)?;
        if hi[t] - lo[t] > min_gap {
            return Ok(Some((lo, hi)));
        }
    }
    Ok(None)
}

/// Values of the individual subproblems at a price, all in minimization form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `Σ_t −U(d_t) + π_t d_t` per agent.
    pub consumers: Vec<f64>,
    /// `−Σ_t π_t p^s_t` per agent.
    pub solar: Vec<f64>,
    /// Battery subproblem value per agent, `None` without storage.
    pub batteries: Vec<Option<f64>>,
    /// Sum of all subproblem values; equals minus the optimal welfare at the optimal price.
    pub total: f64,
    /// Largest per-period power imbalance when every agent plays its own best response.
    pub balance_residual: f64,
}

/// Evaluates every private subproblem at `price`.
pub fn decompose(sc: &Scenario, price: &[f64]) -> Result<Decomposition> {
    sc.validate()?;
    check_lengths("scenario", sc.horizon, price)?;
    let mut consumers = Vec::new();
    let mut solar = Vec::new();
    let mut batteries = Vec::new();
    let mut imbalance = vec![0.0; sc.horizon];
    for a in &sc.agents {
        let d = best_response_consumer(&a.utility, price)?;
        consumers.push(
            (0..sc.horizon)
                .map(|t| -a.utility[t].value_unchecked(d[t]) + price[t] * d[t])
                .sum(),
        );
        let s = best_response_solar(&a.solar, price);
        solar.push(-price.iter().zip(&s.power).map(|(pi, p)| pi * p).sum::<f64>());
        let net = match &a.battery {
            None => {
                batteries.push(None);
                vec![0.0; sc.horizon]
            }
            Some(BatteryModel::Ideal(b)) => {
                let r = best_response_battery(b, price)?;
                batteries.push(Some(r.objective));
                r.power
            }
            Some(BatteryModel::Extended(b)) => {
                let r = best_response_battery_ext(b, price)?;
                batteries.push(Some(r.objective));
                r.discharge.iter().zip(&r.charge).map(|(d, c)| d - c).collect()
            }
        };
        for t in 0..sc.horizon {
            imbalance[t] += d[t] - s.power[t] - net[t];
        }
    }
    let total = consumers.iter().sum::<f64>() + solar.iter().sum::<f64>() + batteries.iter().flatten().sum::<f64>();
    Ok(Decomposition {
        consumers,
        solar,
        batteries,
        total,
        balance_residual: imbalance.iter().fold(0.0f64, |m, r| m.max(r.abs())),
    })
}
