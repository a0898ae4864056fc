//! Translation of agents into solver variables and rows.

use crate::battery::ExtendedBattery;
use crate::solver::{ConcaveProgram, Row};

use super::{AgentSpec, BatteryModel};

/// Solver indices of one battery's decision variables.
#[derive(Debug, Clone)]
pub(crate) enum BatteryVars {
    /// Net discharge `p_t ∈ [−P̄, P̄]`.
    Ideal { power: Vec<usize> },
    /// Discharge and charge components, both non-negative.
    Extended { discharge: Vec<usize>, charge: Vec<usize> },
}

#[derive(Debug, Clone)]
pub(crate) struct BatteryBlock {
    pub vars: BatteryVars,
    /// Row `t` holds `s_t − (retained initial charge)`.
    pub soc_rows: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct AgentVars {
    pub demand: Vec<usize>,
    pub solar: Vec<usize>,
    pub battery: Option<BatteryBlock>,
}

impl AgentVars {
    /// `(var, coef)` terms of the agent's own net supply `p_s + p_b − d` at `t`.
    pub fn net_supply(&self, t: usize) -> Row {
        let mut row = vec![(self.solar[t], 1.0), (self.demand[t], -1.0)];
        row.extend(self.battery_injection(t));
        row
    }

    pub fn battery_injection(&self, t: usize) -> Row {
        match self.battery.as_ref().map(|b| &b.vars) {
            None => Vec::new(),
            Some(BatteryVars::Ideal { power }) => vec![(power[t], 1.0)],
            Some(BatteryVars::Extended { discharge, charge }) => {
                vec![(discharge[t], 1.0), (charge[t], -1.0)]
            }
        }
    }
}

/// How batteries are represented in the program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Representation {
    /// Ideal batteries keep one net-power variable; extended ones are rejected upstream.
    Native,
    /// Every battery is written with separate charge and discharge variables.
    Split,
}

pub(crate) fn extended_view(model: &BatteryModel) -> ExtendedBattery {
    match model {
        BatteryModel::Ideal(b) => b.as_extended(),
        BatteryModel::Extended(b) => b.clone(),
    }
}

/// Adds one agent's consumption, solar and storage variables with their bounds,
/// utilities and state-of-charge rows. No balance rows are added.
pub(crate) fn add_agent(
    p: &mut ConcaveProgram,
    agent: &AgentSpec,
    horizon: usize,
    repr: Representation,
    tie_break: f64,
) -> AgentVars {
    let demand: Vec<usize> = (0..horizon)
        .map(|t| {
            let v = p.add_variable(0.0, f64::INFINITY, 0.0);
            p.set_concave(v, agent.utility[t]);
            v
        })
        .collect();
    let solar = (0..horizon).map(|t| p.add_variable(0.0, agent.solar[t], 0.0)).collect();
    let battery = agent
        .battery
        .as_ref()
        .map(|model| add_battery(p, model, horizon, repr, tie_break));
    AgentVars { demand, solar, battery }
}

/// Adds one battery's power variables and cumulative state-of-charge rows.
pub(crate) fn add_battery(
    p: &mut ConcaveProgram,
    model: &BatteryModel,
    horizon: usize,
    repr: Representation,
    tie_break: f64,
) -> BatteryBlock {
    match (model, repr) {
        (BatteryModel::Ideal(b), Representation::Native) => {
            let power: Vec<usize> = (0..horizon)
                .map(|_| {
                    let v = p.add_variable(-b.p_max, b.p_max, 0.0);
                    p.set_tie_break(v, tie_break);
                    v
                })
                .collect();
            let soc_rows = (0..horizon)
                .map(|t| {
                    let row = power[..=t].iter().map(|&v| (v, -b.dt)).collect();
                    let lo = b.terminal_soc_min.filter(|_| t + 1 == horizon).unwrap_or(0.0);
                    p.add_range(row, lo - b.s0, b.s_max - b.s0)
                })
                .collect();
            BatteryBlock {
                vars: BatteryVars::Ideal { power },
                soc_rows,
            }
        }
        (model, _) => {
            let b = extended_view(model);
            let mut var = |limit: f64| {
                let v = p.add_variable(0.0, limit, 0.0);
                p.set_tie_break(v, tie_break);
                v
            };
            let discharge: Vec<usize> = (0..horizon).map(|_| var(b.p_max_discharge)).collect();
            let charge: Vec<usize> = (0..horizon).map(|_| var(b.p_max_charge)).collect();
            let k = b.discharge_factor();
            let soc_rows = (0..horizon)
                .map(|t| {
                    let mut row = Row::new();
                    for tau in 0..=t {
                        let decay = b.theta.powi((t - tau) as i32) * b.dt;
                        row.push((discharge[tau], -k * decay));
                        row.push((charge[tau], b.sigma_minus * decay));
                    }
                    let retained = b.theta.powi(t as i32 + 1) * b.s0;
                    let lo = b.terminal_soc_min.filter(|_| t + 1 == horizon).unwrap_or(0.0);
                    p.add_range(row, lo - retained, b.s_max - retained)
                })
                .collect();
            BatteryBlock {
                vars: BatteryVars::Extended { discharge, charge },
                soc_rows,
            }
        }
    }
}
