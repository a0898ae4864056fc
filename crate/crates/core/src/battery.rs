//! Storage models: state-of-charge recursions, feasibility checks and the
//! complementarity repair for the non-ideal model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for limit checks.
pub const FEASIBILITY_TOL: f64 = 1e-7;

/// Lossless battery with symmetric power limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealBattery {
    /// Charge/discharge power limit (kW).
    pub p_max: f64,
    /// Energy capacity (kWh).
    pub s_max: f64,
    /// Initial state of charge (kWh).
    pub s0: f64,
    /// Period length (h).
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Optional lower bound on the final state of charge (kWh).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_soc_min: Option<f64>,
}

/// How the discharge term of the non-ideal recursion is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DischargeScaling {
    /// Withdraw `p⁺/σ⁺` from storage for `p⁺` delivered.
    #[default]
    DischargeEfficiency,
    /// Withdraw `p⁺/σ⁻` (the alternate reading of the recursion).
    ChargeEfficiency,
}

/// Battery with conversion losses, self-discharge and asymmetric limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedBattery {
    pub p_max_discharge: f64,
    pub p_max_charge: f64,
    /// Discharge efficiency σ⁺ ∈ (0, 1].
    pub sigma_plus: f64,
    /// Charge efficiency σ⁻ ∈ (0, 1].
    pub sigma_minus: f64,
    /// Per-period retention θ; `1.0` means no self-discharge.
    pub theta: f64,
    pub s_max: f64,
    pub s0: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_soc_min: Option<f64>,
    #[serde(default)]
    pub discharge_scaling: DischargeScaling,
}

fn default_dt() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Power,
    EnergyBelowZero,
    EnergyAboveCapacity,
    TerminalEnergy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Zero-based period index.
    pub period: usize,
    pub kind: ViolationKind,
    /// Amount by which the limit is exceeded.
    pub magnitude: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, period: usize, kind: ViolationKind, magnitude: f64) {
        if magnitude > FEASIBILITY_TOL {
            self.violations.push(Violation {
                period,
                kind,
                magnitude,
            });
        }
    }
}

impl IdealBattery {
    pub fn new(p_max: f64, s_max: f64, s0: f64, dt: f64) -> Result<Self> {
        let b = Self {
            p_max,
            s_max,
            s0,
            dt,
            terminal_soc_min: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_max >= 0.0 && self.s_max >= 0.0 && self.dt > 0.0) {
            return Err(Error::domain(format!(
                "battery limits must be non-negative and dt positive: {self:?}"
            )));
        }
        if !(0.0..=self.s_max).contains(&self.s0) {
            return Err(Error::domain(format!(
                "initial state of charge {} outside [0, {}]",
                self.s0, self.s_max
            )));
        }
        check_terminal(self.terminal_soc_min, self.s_max)
    }

    /// `s_t = s_{t-1} − p_t·ΔT` starting from `s0`; no limits are enforced.
    pub fn soc_trajectory(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .scan(self.s0, |s, &pt| {
                *s -= pt * self.dt;
                Some(*s)
            })
            .collect()
    }

    pub fn check_feasible(&self, p: &[f64]) -> ViolationReport {
        let mut report = ViolationReport::default();
        for (t, (&pt, s)) in p.iter().zip(self.soc_trajectory(p)).enumerate() {
            report.push(t, ViolationKind::Power, pt.abs() - self.p_max);
            report.push(t, ViolationKind::EnergyBelowZero, -s);
            report.push(t, ViolationKind::EnergyAboveCapacity, s - self.s_max);
        }
        if let (Some(min), Some(&last)) = (self.terminal_soc_min, self.soc_trajectory(p).last()) {
            report.push(p.len() - 1, ViolationKind::TerminalEnergy, min - last);
        }
        report
    }

    /// Net cost `−Σ π_t p_t` of a dispatch.
    pub fn dispatch_cost(price: &[f64], p: &[f64]) -> f64 {
        -price.iter().zip(p).map(|(pi, pt)| pi * pt).sum::<f64>()
    }

    /// The same battery written in the non-ideal parameterization.
    pub fn as_extended(&self) -> ExtendedBattery {
        ExtendedBattery {
            p_max_discharge: self.p_max,
            p_max_charge: self.p_max,
            sigma_plus: 1.0,
            sigma_minus: 1.0,
            theta: 1.0,
            s_max: self.s_max,
            s0: self.s0,
            dt: self.dt,
            terminal_soc_min: self.terminal_soc_min,
            discharge_scaling: DischargeScaling::default(),
        }
    }
}

impl ExtendedBattery {
    pub fn validate(&self) -> Result<()> {
        let eff = |x: f64| x > 0.0 && x <= 1.0;
        if !(eff(self.sigma_plus) && eff(self.sigma_minus)) {
            return Err(Error::domain("efficiencies must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::domain(format!("retention {} outside [0, 1]", self.theta)));
        }
        if !(self.p_max_charge >= 0.0 && self.p_max_discharge >= 0.0 && self.s_max >= 0.0 && self.dt > 0.0) {
            return Err(Error::domain(format!(
                "battery limits must be non-negative and dt positive: {self:?}"
            )));
        }
        if !(0.0..=self.s_max).contains(&self.s0) {
            return Err(Error::domain(format!(
                "initial state of charge {} outside [0, {}]",
                self.s0, self.s_max
            )));
        }
        check_terminal(self.terminal_soc_min, self.s_max)
    }

    /// Stored energy withdrawn per unit of delivered discharge power.
    pub fn discharge_factor(&self) -> f64 {
        match self.discharge_scaling {
            DischargeScaling::DischargeEfficiency => 1.0 / self.sigma_plus,
            DischargeScaling::ChargeEfficiency => 1.0 / self.sigma_minus,
        }
    }

    /// `s_t = θ·s_{t−1} + (σ⁻·p⁻_t − p⁺_t/σ⁺)·ΔT`.
    pub fn soc_trajectory(&self, p_dis: &[f64], p_chg: &[f64]) -> Result<Vec<f64>> {
        if p_dis.len() != p_chg.len() {
            return Err(Error::domain("charge and discharge sequences differ in length"));
        }
        if p_dis.iter().chain(p_chg).any(|&x| !(x >= 0.0)) {
            return Err(Error::domain("charge/discharge components must be >= 0"));
        }
        let k = self.discharge_factor();
        Ok(p_dis
            .iter()
            .zip(p_chg)
            .scan(self.s0, |s, (&dis, &chg)| {
                *s = self.theta * *s + (self.sigma_minus * chg - k * dis) * self.dt;
                Some(*s)
            })
            .collect())
    }

    pub fn check_feasible(&self, p_dis: &[f64], p_chg: &[f64]) -> Result<ViolationReport> {
        let soc = self.soc_trajectory(p_dis, p_chg)?;
        let mut report = ViolationReport::default();
        for t in 0..soc.len() {
            report.push(t, ViolationKind::Power, p_dis[t] - self.p_max_discharge);
            report.push(t, ViolationKind::Power, p_chg[t] - self.p_max_charge);
            report.push(t, ViolationKind::EnergyBelowZero, -soc[t]);
            report.push(t, ViolationKind::EnergyAboveCapacity, soc[t] - self.s_max);
        }
        if let (Some(min), Some(&last)) = (self.terminal_soc_min, soc.last()) {
            report.push(soc.len() - 1, ViolationKind::TerminalEnergy, min - last);
        }
        Ok(report)
    }

    /// Rewrites a relaxed dispatch so charge and discharge never overlap while
    /// keeping the stored-energy trajectory unchanged.
    pub fn repair_complementarity(&self, p_dis: &[f64], p_chg: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if p_dis.len() != p_chg.len() {
            return Err(Error::domain("charge and discharge sequences differ in length"));
        }
        for (t, (&dis, &chg)) in p_dis.iter().zip(p_chg).enumerate() {
            let ok = (-FEASIBILITY_TOL..=self.p_max_discharge + FEASIBILITY_TOL).contains(&dis)
                && (-FEASIBILITY_TOL..=self.p_max_charge + FEASIBILITY_TOL).contains(&chg);
            if !ok {
                return Err(Error::domain(format!(
                    "period {t}: ({dis}, {chg}) violates the power limits"
                )));
            }
        }
        let k = self.discharge_factor();
        let sm = self.sigma_minus;
        Ok(p_dis
            .iter()
            .zip(p_chg)
            .map(|(&dis, &chg)| {
                let (dis, chg) = (dis.max(0.0), chg.max(0.0));
                let net_out = k * dis - sm * chg;
                if net_out >= 0.0 {
                    (net_out / k, 0.0)
                } else {
                    (0.0, -net_out / sm)
                }
            })
            .unzip())
    }
}

fn check_terminal(min: Option<f64>, s_max: f64) -> Result<()> {
    match min {
        Some(m) if !(0.0..=s_max).contains(&m) => Err(Error::domain(format!(
            "terminal state of charge bound {m} outside [0, {s_max}]"
        ))),
        _ => Ok(()),
    }
}
