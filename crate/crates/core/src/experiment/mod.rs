//! Seeded computational experiments: convergence against (γ, δ⁰) for two
//! agents, and convergence and welfare for many agents with storage.

mod report;


use chrono::Timelike;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispatch::{solve_centralized, AgentSpec, DispatchSolution, Scenario};
use crate::error::{Error, Result};
use crate::negotiation::{run_negotiation, settle, NegotiationConfig, SettlementReport, TradeLedger};
use crate::scenario::{generate_scenario, AnchorPrice, ProfileSet, ProfileSource, ScenarioRecipe};
use crate::utility::QuasiCpeUtility;

pub use report::{write_gamma_sweep, write_multiagent, ReportFormat};

/// `|W_centr|` below this leaves the relative gap undefined.
pub const MIN_WELFARE_FOR_RATIO: f64 = 1e-6;

/// Settlement slack below which an agent counts as worse off than not trading.
pub const WEAK_PARETO_TOL: f64 = 1e-6;

/// `100·ΔW / W_centr`, or `None` when `W_centr` is too close to zero.
pub fn welfare_gap_pct(delta_w: f64, w_centr: f64) -> Option<f64> {
    (w_centr.abs() >= MIN_WELFARE_FOR_RATIO).then(|| 100.0 * delta_w / w_centr)
}

/// RNG for one trial: the same `(seed, trial)` always gives the same stream,
/// independent of scheduling.
fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn check_elasticity((lo, hi): (f64, f64)) -> Result<()> {
    if lo <= hi && hi < 0.0 && lo.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "elasticity range [{lo}, {hi}] must satisfy lo ≤ hi < 0"
        )))
    }
}

// ---------------------------------------------------------------------------
// Two-agent sweep over (γ, δ⁰)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaSweepConfig {
    pub gammas: Vec<f64>,
    pub delta0s: Vec<f64>,
    pub trials: usize,
    pub epsilon: f64,
    pub max_iters: usize,
    pub elasticity: (f64, f64),
    pub profiles: ProfileSource,
    pub seed: u64,
}

impl Default for GammaSweepConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.05, 0.2, 0.4, 0.7, 0.95],
            delta0s: vec![0.5, 1.5],
            trials: 20,
            epsilon: 1e-3,
            max_iters: 5000,
            elasticity: (-1.5, -0.5),
            profiles: ProfileSource::default(),
            seed: 0,
        }
    }
}

/// Values `start, start+step, …` up to `stop`, computed from integer counts.
fn grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step).round() as usize;
    (0..=n)
        .map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9)
        .collect()
}

impl GammaSweepConfig {
    /// γ ∈ {0.05, 0.10, …, 0.95} × δ⁰ ∈ {0.1, 0.2, …, 2.0}, 100 trials per cell.
    pub fn full_grid() -> Self {
        Self {
            gammas: grid(0.05, 0.95, 0.05),
            delta0s: grid(0.1, 2.0, 0.1),
            trials: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() || self.delta0s.is_empty() || self.trials == 0 {
            return Err(Error::Config("sweep needs at least one γ, one δ⁰ and one trial".into()));
        }
        check_elasticity(self.elasticity)?;
        for &gamma in &self.gammas {
            for &delta0 in &self.delta0s {
                self.negotiation(gamma, delta0)
                    .validate()
                    .map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    fn negotiation(&self, gamma: f64, delta0: f64) -> NegotiationConfig {
        NegotiationConfig {
            gamma,
            delta0,
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            pi_agent_index: 0,
            keep_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub gamma: f64,
    pub delta0: f64,
    pub mean_iters: f64,
    pub max_iters: usize,
    pub converged: usize,
    pub trials: usize,
}

/// Two agents, one period: loads and hour drawn from the profiles, utilities
/// anchored at the banded price, and each agent's solar uniform on
/// `[0, 2·load]`.
pub fn two_agent_instance(profiles: &ProfileSet, elasticity: (f64, f64), rng: &mut impl Rng) -> Result<Scenario> {
    if profiles.agent_count() < 2 {
        return Err(Error::Window(
            "two-agent instances need profiles with at least 2 agents".into(),
        ));
    }
    let hour = rng.gen_range(0..profiles.hours());
    let pi0 = AnchorPrice::TimeOfUse.at_hour(profiles.timestamp(hour).hour());
    let mut agents = Vec::with_capacity(2);
    for i in rand::seq::index::sample(rng, profiles.agent_count(), 2).into_vec() {
        let load = profiles.load[i][hour].max(crate::scenario::MIN_ANCHOR_DEMAND);
        let r_hat = rng.gen_range(elasticity.0..=elasticity.1);
        agents.push(AgentSpec {
            id: profiles.agent_ids[i].clone(),
            utility: vec![QuasiCpeUtility::with_default_shift(pi0, load, r_hat)?],
            solar: vec![rng.gen_range(0.0..=2.0 * load)],
            battery: None,
        });
    }
    Ok(Scenario {
        horizon: 1,
        dt: 1.0,
        agents,
    })
}

/// Mean and maximum iterations per (γ, δ⁰) cell. Trial `k` uses the same
/// instance in every cell. Runs that hit the iteration limit count as
/// `max_iters`.
pub fn run_gamma_sweep(cfg: &GammaSweepConfig) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    let profiles = cfg.profiles.load()?;
    let instances: Vec<Scenario> = (0..cfg.trials)
        .map(|k| two_agent_instance(&profiles, cfg.elasticity, &mut trial_rng(cfg.seed, k as u64)))
        .collect::<Result<_>>()?;
    let cells: Vec<(f64, f64)> = cfg
        .gammas
        .iter()
        .flat_map(|&g| cfg.delta0s.iter().map(move |&d| (g, d)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.trials).map(move |k| (c, k)))
        .collect();
    let runs: Vec<(usize, bool)> = jobs
        .par_iter()
        .map(|&(c, k)| {
            let (gamma, delta0) = cells[c];
            let ledger = run_negotiation(&instances[k], &cfg.negotiation(gamma, delta0))?;
            Ok((ledger.iterations, ledger.converged()))
        })
        .collect::<Result<_>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, &(gamma, delta0))| {
            let cell = &runs[c * cfg.trials..(c + 1) * cfg.trials];
            SweepCell {
                gamma,
                delta0,
                mean_iters: cell.iter().map(|r| r.0 as f64).sum::<f64>() / cfg.trials as f64,
                max_iters: cell.iter().map(|r| r.0).max().unwrap_or(0),
                converged: cell.iter().filter(|r| r.1).count(),
                trials: cfg.trials,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Many agents with storage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiAgentConfig {
    /// Total battery capacities S̄_tot (kWh).
    pub capacities: Vec<f64>,
    /// Battery power limits P̄ᵇ (kW).
    pub powers: Vec<f64>,
    /// Trials per (capacity, power) pair.
    pub trials: usize,
    pub horizons: Vec<usize>,
    /// Inclusive range of agent counts.
    pub agents: (usize, usize),
    pub elasticity: (f64, f64),
    pub gamma: f64,
    pub delta0: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub profiles: ProfileSource,
    pub seed: u64,
}

impl Default for MultiAgentConfig {
    fn default() -> Self {
        Self {
            capacities: vec![15.0, 40.0, 300.0],
            powers: vec![4.0],
            trials: 20,
            horizons: vec![1, 12, 24],
            agents: (2, 6),
            elasticity: (-1.5, -0.5),
            gamma: 0.5,
            delta0: 0.5,
            epsilon: 1e-3,
            max_iters: 5000,
            profiles: ProfileSource::default(),
            seed: 0,
        }
    }
}

impl MultiAgentConfig {
    /// S̄_tot ∈ {15, 25, 40, 80, 300} × P̄ᵇ ∈ {1, 2, 4, 8}, 60 trials per pair, N ∈ [2, 10].
    pub fn full_grid() -> Self {
        Self {
            capacities: vec![15.0, 25.0, 40.0, 80.0, 300.0],
            powers: vec![1.0, 2.0, 4.0, 8.0],
            trials: 60,
            agents: (2, 10),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacities.is_empty() || self.powers.is_empty() || self.horizons.is_empty() || self.trials == 0 {
            return Err(Error::Config(
                "experiment needs capacities, powers, horizons and trials".into(),
            ));
        }
        if self
            .capacities
            .iter()
            .chain(&self.powers)
            .any(|x| !(x.is_finite() && *x >= 0.0))
        {
            return Err(Error::Config("capacities and powers must be ≥ 0".into()));
        }
        if self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be ≥ 1".into()));
        }
        let (lo, hi) = self.agents;
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!(
                "agent range [{lo}, {hi}] must be ordered and start at 2 or more"
            )));
        }
        if let Some(shape) = self.profiles.shape() {
            self.check_fits(shape).map_err(|e| Error::Config(e.to_string()))?;
        }
        check_elasticity(self.elasticity)?;
        self.negotiation().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Every agent count and horizon fits profiles of `(agents, hours)`.
    fn check_fits(&self, (agents, hours): (usize, usize)) -> Result<()> {
        if self.agents.1 > agents {
            return Err(Error::Window(format!(
                "up to {} agents requested, profiles have {agents}",
                self.agents.1
            )));
        }
        if let Some(t) = self.horizons.iter().find(|&&t| t > hours) {
            return Err(Error::Window(format!("horizon {t} exceeds the {hours} profile hours")));
        }
        Ok(())
    }

    fn negotiation(&self) -> NegotiationConfig {
        NegotiationConfig {
            gamma: self.gamma,
            delta0: self.delta0,
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            pi_agent_index: 0,
            keep_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub capacity: f64,
    pub power: f64,
    pub trial: usize,
    pub horizon: usize,
    pub agents: usize,
    /// First hour of the window in the profiles.
    pub start: usize,
    pub scenario_seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub w_no: f64,
    pub w_centr: f64,
    pub w_p2p: f64,
    pub delta_w: f64,
    pub delta_w_pct: Option<f64>,
    /// Smallest per-agent gain over not trading.
    pub min_slack: f64,
    pub weak_pareto: bool,
    pub degenerate_price_iterations: usize,
}

/// Table I shape: ΔW statistics over converged trials with horizon `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareByHorizon {
    pub horizon: usize,
    pub trials: usize,
    pub converged: usize,
    pub mean_dw_pct: Option<f64>,
    pub std_dw_pct: Option<f64>,
    pub max_dw_pct: Option<f64>,
    pub mean_dw: Option<f64>,
    pub std_dw: Option<f64>,
    pub max_dw: Option<f64>,
}

/// Iteration quartiles over converged trials with a given total capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationsByCapacity {
    pub capacity: f64,
    pub trials: usize,
    pub converged: usize,
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
}

/// One agent's welfare with no trade, centrally dispatched, and after
/// negotiation; the last row of a table is the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentWelfareRow {
    pub agent: String,
    pub w_no: f64,
    pub w_centr: f64,
    pub w_p2p: f64,
    pub delta_w: f64,
    pub delta_w_pct: Option<f64>,
}

impl AgentWelfareRow {
    fn new(agent: String, w_no: f64, w_centr: f64, w_p2p: f64) -> Self {
        let delta_w = w_centr - w_p2p;
        Self {
            agent,
            w_no,
            w_centr,
            w_p2p,
            delta_w,
            delta_w_pct: welfare_gap_pct(delta_w, w_centr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiAgentReport {
    pub trials: Vec<TrialRecord>,
    pub by_horizon: Vec<WelfareByHorizon>,
    pub by_capacity: Vec<IterationsByCapacity>,
    /// Per-agent table for the converged trial with the largest ΔW_p.
    pub special_instance: Option<(TrialRecord, Vec<AgentWelfareRow>)>,
}

/// Consumption utility plus trade payments at the centralized prices, per
/// agent, followed by the total.
pub fn welfare_table(sc: &Scenario, central: &DispatchSolution, settlement: &SettlementReport) -> Vec<AgentWelfareRow> {
    let mut rows: Vec<AgentWelfareRow> = sc
        .agents
        .iter()
        .zip(&central.agents)
        .zip(&settlement.agents)
        .map(|((spec, d), s)| {
            let w_centr: f64 = (0..sc.horizon)
                .map(|t| {
                    let own = d.solar[t] + d.battery.as_ref().map_or(0.0, |b| b.net()[t]);
                    let received = d.demand[t] - own;
                    spec.utility[t].value_unchecked(d.demand[t]) - central.price[t] * received * sc.dt
                })
                .sum();
            AgentWelfareRow::new(spec.id.clone(), s.no_trade, w_centr, s.realized)
        })
        .collect();
    let total = |f: fn(&AgentWelfareRow) -> f64| rows.iter().map(f).sum::<f64>();
    let row = AgentWelfareRow::new(
        "total".into(),
        total(|r| r.w_no),
        total(|r| r.w_centr),
        total(|r| r.w_p2p),
    );
    rows.push(row);
    rows
}

/// Picks a window start with PV output so the PV can be scaled to the load.
fn draw_window(profiles: &ProfileSet, horizon: usize, rng: &mut impl Rng) -> Result<usize> {
    for _ in 0..10_000 {
        let start = rng.gen_range(0..=profiles.hours() - horizon);
        if (0..profiles.agent_count()).any(|i| profiles.pv[i][start..start + horizon].iter().any(|&p| p > 0.0)) {
            return Ok(start);
        }
    }
    Err(Error::Window(format!("no {horizon}-hour window with PV output")))
}

struct Trial {
    record: TrialRecord,
    scenario: Scenario,
    central: DispatchSolution,
    settlement: SettlementReport,
}

fn run_trial(cfg: &MultiAgentConfig, profiles: &ProfileSet, pair: usize, trial: usize) -> Result<Trial> {
    let capacity = cfg.capacities[pair / cfg.powers.len()];
    let power = cfg.powers[pair % cfg.powers.len()];
    // Every (capacity, power) pair sees the same instances for a given trial index.
    let mut rng = trial_rng(cfg.seed, trial as u64);
    let horizon = cfg.horizons[rng.gen_range(0..cfg.horizons.len())];
    let agents = rng.gen_range(cfg.agents.0..=cfg.agents.1);
    let start = draw_window(profiles, horizon, &mut rng)?;
    let scenario_seed: u64 = rng.gen();
    let recipe = ScenarioRecipe {
        agents,
        horizon,
        start,
        elasticity: cfg.elasticity,
        total_capacity: capacity,
        battery_power: power,
        seed: scenario_seed,
        ..ScenarioRecipe::default()
    };
    let scenario = generate_scenario(profiles, &recipe)?;
    let central = solve_centralized(&scenario)?;
    let ledger: TradeLedger = run_negotiation(&scenario, &cfg.negotiation())?;
    let settlement = settle(&scenario, &ledger)?;
    let delta_w = central.welfare - settlement.welfare;
    let min_slack = settlement.min_slack();
    Ok(Trial {
        record: TrialRecord {
            capacity,
            power,
            trial,
            horizon,
            agents,
            start,
            scenario_seed,
            iterations: ledger.iterations,
            converged: ledger.converged(),
            w_no: settlement.no_trade_welfare,
            w_centr: central.welfare,
            w_p2p: settlement.welfare,
            delta_w,
            delta_w_pct: welfare_gap_pct(delta_w, central.welfare),
            min_slack,
            weak_pareto: min_slack >= -WEAK_PARETO_TOL,
            degenerate_price_iterations: ledger.degenerate_price_iterations,
        },
        scenario,
        central,
        settlement,
    })
}

/// Linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation; zero for a single value.
fn std_dev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() == 1 {
        return Some(0.0);
    }
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

fn max(xs: &[f64]) -> Option<f64> {
    xs.iter().copied().reduce(f64::max)
}

/// Summaries recomputed from the per-trial rows alone.
pub fn summarize(
    trials: &[TrialRecord],
    horizons: &[usize],
    capacities: &[f64],
) -> (Vec<WelfareByHorizon>, Vec<IterationsByCapacity>) {
    let mut hs = horizons.to_vec();
    hs.sort_unstable();
    hs.dedup();
    let by_horizon = hs
        .iter()
        .map(|&t| {
            let all: Vec<&TrialRecord> = trials.iter().filter(|r| r.horizon == t).collect();
            let ok: Vec<&&TrialRecord> = all.iter().filter(|r| r.converged).collect();
            let pct: Vec<f64> = ok.iter().filter_map(|r| r.delta_w_pct).collect();
            let dw: Vec<f64> = ok.iter().map(|r| r.delta_w).collect();
            WelfareByHorizon {
                horizon: t,
                trials: all.len(),
                converged: ok.len(),
                mean_dw_pct: mean(&pct),
                std_dw_pct: std_dev(&pct),
                max_dw_pct: max(&pct),
                mean_dw: mean(&dw),
                std_dw: std_dev(&dw),
                max_dw: max(&dw),
            }
        })
        .collect();
    let mut cs = capacities.to_vec();
    cs.sort_by(f64::total_cmp);
    cs.dedup();
    let by_capacity = cs
        .iter()
        .map(|&c| {
            let all: Vec<&TrialRecord> = trials.iter().filter(|r| r.capacity == c).collect();
            let mut iters: Vec<f64> = all
                .iter()
                .filter(|r| r.converged)
                .map(|r| r.iterations as f64)
                .collect();
            iters.sort_by(f64::total_cmp);
            IterationsByCapacity {
                capacity: c,
                trials: all.len(),
                converged: iters.len(),
                min: quantile(&iters, 0.0),
                q1: quantile(&iters, 0.25),
                median: quantile(&iters, 0.5),
                q3: quantile(&iters, 0.75),
                max: quantile(&iters, 1.0),
            }
        })
        .collect();
    (by_horizon, by_capacity)
}

/// Runs every (capacity, power, trial) combination. Failed solves are
/// errors; trials that hit the iteration limit are kept and flagged.
pub fn run_multiagent_experiment(cfg: &MultiAgentConfig) -> Result<MultiAgentReport> {
    cfg.validate()?;
    let profiles = cfg.profiles.load()?;
    cfg.check_fits((profiles.agent_count(), profiles.hours()))?;
    let pairs = cfg.capacities.len() * cfg.powers.len();
    let jobs: Vec<(usize, usize)> = (0..pairs).flat_map(|p| (0..cfg.trials).map(move |k| (p, k))).collect();
    let mut done: Vec<Trial> = jobs
        .par_iter()
        .map(|&(p, k)| run_trial(cfg, &profiles, p, k))
        .collect::<Result<_>>()?;
    done.sort_by(|a, b| {
        let (a, b) = (&a.record, &b.record);
        a.capacity
            .total_cmp(&b.capacity)
            .then(a.power.total_cmp(&b.power))
            .then(a.trial.cmp(&b.trial))
    });
    let special = done
        .iter()
        .filter(|t| t.record.converged)
        .filter_map(|t| t.record.delta_w_pct.map(|p| (p, t)))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, t)| (t.record.clone(), welfare_table(&t.scenario, &t.central, &t.settlement)));
    let trials: Vec<TrialRecord> = done.into_iter().map(|t| t.record).collect();
    let (by_horizon, by_capacity) = summarize(&trials, &cfg.horizons, &cfg.capacities);
    Ok(MultiAgentReport {
        trials,
        by_horizon,
        by_capacity,
        special_instance: special,
    })
}
