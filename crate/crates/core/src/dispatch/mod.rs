//! Centralized welfare maximization, price extraction, individual best
//! responses and optimality diagnostics.

mod kkt;
pub(crate) mod model;
mod response;

use serde::{Deserialize, Serialize};

use crate::battery::{ExtendedBattery, IdealBattery};
use crate::error::{Error, Result};
use crate::solver::{solve_concave_program, ConcaveProgram, SolveResult, CANONICAL_TIE_BREAK};
use crate::utility::QuasiCpeUtility;

pub use kkt::{verify_kkt, KktReport};
pub use response::{
    battery_dispatch_range, best_response_battery, best_response_battery_ext, best_response_consumer,
    best_response_solar, decompose, non_uniqueness_witness, BatteryResponse, Decomposition, ExtendedBatteryResponse,
    SolarResponse,
};

use model::{AgentVars, BatteryVars, Representation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatteryModel {
    Ideal(IdealBattery),
    Extended(ExtendedBattery),
}

impl BatteryModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            BatteryModel::Ideal(b) => b.validate(),
            BatteryModel::Extended(b) => b.validate(),
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            BatteryModel::Ideal(b) => b.dt,
            BatteryModel::Extended(b) => b.dt,
        }
    }

    pub fn s_max(&self) -> f64 {
        match self {
            BatteryModel::Ideal(b) => b.s_max,
            BatteryModel::Extended(b) => b.s_max,
        }
    }
}

/// One prosumer: a consumer with optional solar capacity and storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    /// One utility per period.
    pub utility: Vec<QuasiCpeUtility>,
    /// Available solar power per period (kW).
    pub solar: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<BatteryModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub horizon: usize,
    #[serde(default = "one")]
    pub dt: f64,
    pub agents: Vec<AgentSpec>,
}

fn one() -> f64 {
    1.0
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::domain("horizon must be at least one period"));
        }
        if self.agents.is_empty() {
            return Err(Error::domain("scenario has no agents"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::domain(format!("period length {} must be positive", self.dt)));
        }
        for a in &self.agents {
            if a.utility.len() != self.horizon || a.solar.len() != self.horizon {
                return Err(Error::domain(format!(
                    "agent {}: utility and solar sequences must have {} entries",
                    a.id, self.horizon
                )));
            }
            if let Some(t) = a.solar.iter().position(|&s| !(s >= 0.0 && s.is_finite())) {
                return Err(Error::domain(format!(
                    "agent {}: solar capacity at period {t} must be finite and >= 0",
                    a.id
                )));
            }
            if let Some(b) = &a.battery {
                b.validate()?;
                if (b.dt() - self.dt).abs() > 1e-12 {
                    return Err(Error::domain(format!(
                        "agent {}: battery period length {} differs from scenario period {}",
                        a.id,
                        b.dt(),
                        self.dt
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn has_extended_batteries(&self) -> bool {
        self.agents
            .iter()
            .any(|a| matches!(a.battery, Some(BatteryModel::Extended(_))))
    }

    pub fn agent_index(&self, id: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryDispatch {
    pub discharge: Vec<f64>,
    pub charge: Vec<f64>,
    pub soc: Vec<f64>,
    /// Signed dual of the discharge limit (the symmetric rate limit for ideal batteries).
    pub discharge_duals: Vec<f64>,
    /// Signed dual of the charge limit; zero for ideal batteries.
    pub charge_duals: Vec<f64>,
    /// Signed dual of the state-of-charge limits.
    pub energy_duals: Vec<f64>,
}

impl BatteryDispatch {
    /// Net discharge `p⁺ − p⁻`.
    pub fn net(&self) -> Vec<f64> {
        self.discharge.iter().zip(&self.charge).map(|(d, c)| d - c).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDispatch {
    pub demand: Vec<f64>,
    pub solar: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<BatteryDispatch>,
    /// Dual of `d ≥ 0`, non-negative.
    pub demand_duals: Vec<f64>,
    /// Signed dual of the solar limits.
    pub solar_duals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    pub price: Vec<f64>,
    pub agents: Vec<AgentDispatch>,
    /// Total utility `Σ U` ($).
    pub welfare: f64,
    pub kkt_residual: f64,
    pub duality_gap: f64,
    /// Weight of the battery tie-break term used in the solve.
    pub tie_break: f64,
    /// Whether batteries were modeled with separate charge and discharge variables.
    pub split_batteries: bool,
}

impl DispatchSolution {
    /// `Σ d − Σ p_s − Σ p_b` per period.
    pub fn balance_residuals(&self) -> Vec<f64> {
        let horizon = self.price.len();
        (0..horizon)
            .map(|t| {
                self.agents
                    .iter()
                    .map(|a| {
                        let net = a.battery.as_ref().map_or(0.0, |b| b.discharge[t] - b.charge[t]);
                        a.demand[t] - a.solar[t] - net
                    })
                    .sum()
            })
            .collect()
    }
}

/// Maximizes total utility with ideal batteries.
pub fn solve_centralized(sc: &Scenario) -> Result<DispatchSolution> {
    sc.validate()?;
    if sc.has_extended_batteries() {
        return Err(Error::domain(
            "scenario has non-ideal batteries; use solve_centralized_ext",
        ));
    }
    solve(sc, Representation::Native)
}

/// Maximizes total utility with (possibly) non-ideal batteries by solving the
/// relaxation without charge/discharge complementarity and repairing it.
pub fn solve_centralized_ext(sc: &Scenario) -> Result<DispatchSolution> {
    sc.validate()?;
    let mut sol = solve(sc, Representation::Split)?;
    if let Some(t) = sol.price.iter().position(|&pi| pi < -1e-9) {
        return Err(Error::Internal(format!(
            "negative price {} at period {t}; the complementarity relaxation is not exact",
            sol.price[t]
        )));
    }
    for (agent, spec) in sol.agents.iter_mut().zip(&sc.agents) {
        let (Some(bd), Some(model)) = (agent.battery.as_mut(), spec.battery.as_ref()) else {
            continue;
        };
        let ext = model::extended_view(model);
        let (dis, chg) = ext.repair_complementarity(&bd.discharge, &bd.charge)?;
        // The repair never lowers net injection; return any surplus by curtailing
        // this agent's solar, or by consuming it when there is no solar to curtail.
        for t in 0..sc.horizon {
            let mut surplus = (dis[t] - chg[t]) - (bd.discharge[t] - bd.charge[t]);
            let cut = surplus.min(agent.solar[t]);
            agent.solar[t] -= cut;
            surplus -= cut;
            agent.demand[t] += surplus;
        }
        bd.discharge = dis;
        bd.charge = chg;
        bd.soc = ext.soc_trajectory(&bd.discharge, &bd.charge)?;
    }
    sol.welfare = welfare(sc, &sol.agents);
    let worst = sol.balance_residuals().iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if worst > 1e-6 {
        return Err(Error::Internal(format!(
            "power balance residual {worst:e} after complementarity repair"
        )));
    }
    Ok(sol)
}

pub(crate) fn welfare(sc: &Scenario, agents: &[AgentDispatch]) -> f64 {
    agents
        .iter()
        .zip(&sc.agents)
        .map(|(a, spec)| {
            (0..sc.horizon)
                .map(|t| spec.utility[t].value_unchecked(a.demand[t].max(0.0)))
                .sum::<f64>()
        })
        .sum()
}

fn solve(sc: &Scenario, repr: Representation) -> Result<DispatchSolution> {
    let mut p = ConcaveProgram::new();
    let vars: Vec<AgentVars> = sc
        .agents
        .iter()
        .map(|a| model::add_agent(&mut p, a, sc.horizon, repr, CANONICAL_TIE_BREAK))
        .collect();
    // Σ d − Σ p_s − Σ p_b = 0, so the row dual is the price.
    let balance: Vec<usize> = (0..sc.horizon)
        .map(|t| {
            let row = vars
                .iter()
                .flat_map(|v| v.net_supply(t))
                .map(|(j, a)| (j, -a))
                .collect();
            p.add_equality(row, 0.0)
        })
        .collect();
    let r = solve_concave_program(&p)?;
    if !r.is_optimal() {
        return Err(Error::Internal(format!(
            "centralized dispatch did not solve ({:?}, residual {:e})",
            r.status, r.kkt_residual
        )));
    }
    let agents = vars
        .iter()
        .zip(&sc.agents)
        .map(|(v, spec)| extract_agent(&r, v, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(DispatchSolution {
        price: balance.iter().map(|&i| r.eq_duals[i]).collect(),
        welfare: welfare(sc, &agents),
        agents,
        kkt_residual: r.kkt_residual,
        duality_gap: r.duality_gap,
        tie_break: CANONICAL_TIE_BREAK,
        split_batteries: repr == Representation::Split,
    })
}

pub(crate) fn extract_agent(r: &SolveResult, v: &AgentVars, spec: &AgentSpec) -> Result<AgentDispatch> {
    let pick = |idx: &[usize]| idx.iter().map(|&j| r.x[j]).collect::<Vec<f64>>();
    let duals = |idx: &[usize]| idx.iter().map(|&j| r.bound_duals[j]).collect::<Vec<f64>>();
    let battery = match (&v.battery, &spec.battery) {
        (Some(block), Some(model)) => {
            let energy_duals = block.soc_rows.iter().map(|&i| r.range_duals[i]).collect();
            let bd = match &block.vars {
                BatteryVars::Ideal { power } => {
                    let net = pick(power);
                    BatteryDispatch {
                        discharge: net.iter().map(|p| p.max(0.0)).collect(),
                        charge: net.iter().map(|p| (-p).max(0.0)).collect(),
                        soc: Vec::new(),
                        discharge_duals: duals(power),
                        charge_duals: vec![0.0; power.len()],
                        energy_duals,
                    }
                }
                BatteryVars::Extended { discharge, charge } => BatteryDispatch {
                    discharge: pick(discharge).iter().map(|p| p.max(0.0)).collect(),
                    charge: pick(charge).iter().map(|p| p.max(0.0)).collect(),
                    soc: Vec::new(),
                    discharge_duals: duals(discharge),
                    charge_duals: duals(charge),
                    energy_duals,
                },
            };
            let soc = model::extended_view(model).soc_trajectory(&bd.discharge, &bd.charge)?;
            Some(BatteryDispatch { soc, ..bd })
        }
        _ => None,
    };
    Ok(AgentDispatch {
        demand: pick(&v.demand).iter().map(|d| d.max(0.0)).collect(),
        solar: pick(&v.solar),
        battery,
        demand_duals: v.demand.iter().map(|&j| (-r.bound_duals[j]).max(0.0)).collect(),
        solar_duals: duals(&v.solar),
    })
}

/// Largest violation of any battery limit in a solution, for diagnostics.
pub(crate) fn battery_violation(sc: &Scenario, sol: &DispatchSolution) -> f64 {
    let mut worst = 0.0f64;
    for (a, spec) in sol.agents.iter().zip(&sc.agents) {
        if let (Some(bd), Some(model)) = (&a.battery, &spec.battery) {
            let report = match model {
                BatteryModel::Ideal(b) => b.check_feasible(&bd.net()),
                BatteryModel::Extended(b) => b.check_feasible(&bd.discharge, &bd.charge).unwrap_or_default(),
            };
            for v in report.violations {
                worst = worst.max(v.magnitude);
            }
        }
    }
    worst
}
