//! Profile ingestion, synthetic profiles, and randomized scenario construction.

mod profiles;
mod synthetic;


use std::path::PathBuf;

use chrono::Timelike;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::battery::IdealBattery;
use crate::dispatch::{AgentSpec, BatteryModel, Scenario};
use crate::error::{Error, Result};
use crate::utility::QuasiCpeUtility;

pub use profiles::{load_profiles, read_profiles, ProfileSet, PROFILE_HEADER};
pub use synthetic::SyntheticProfiles;

/// Where experiment profiles come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSource {
    Synthetic(SyntheticProfiles),
    Csv { path: PathBuf },
}

impl Default for ProfileSource {
    fn default() -> Self {
        ProfileSource::Synthetic(SyntheticProfiles::default())
    }
}

impl ProfileSource {
    pub fn load(&self) -> Result<ProfileSet> {
        match self {
            ProfileSource::Synthetic(s) => s.generate(),
            ProfileSource::Csv { path } => load_profiles(path),
        }
    }

    /// Agent and hour counts, when known without reading a file.
    pub fn shape(&self) -> Option<(usize, usize)> {
        match self {
            ProfileSource::Synthetic(s) => Some((s.agents, s.hours)),
            ProfileSource::Csv { .. } => None,
        }
    }
}

/// Demand anchors below this are raised to it so every utility is well defined.
pub const MIN_ANCHOR_DEMAND: f64 = 1e-3;

/// Price at which each hour's utility is anchored to the observed load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AnchorPrice {
    /// 0.10 $/kWh from 21:00 to 11:00, 0.15 from 11:00 to 16:00, 0.30 from 16:00 to 21:00.
    TimeOfUse,
    Flat {
        price: f64,
    },
    /// One price per hour of the day.
    Hourly {
        prices: Vec<f64>,
    },
}

impl AnchorPrice {
    pub fn at_hour(&self, hour_of_day: u32) -> f64 {
        match self {
            AnchorPrice::TimeOfUse => match hour_of_day {
                11..=15 => 0.15,
                16..=20 => 0.30,
                _ => 0.10,
            },
            AnchorPrice::Flat { price } => *price,
            AnchorPrice::Hourly { prices } => prices[hour_of_day as usize % 24],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            AnchorPrice::TimeOfUse => true,
            AnchorPrice::Flat { price } => price.is_finite() && *price > 0.0,
            AnchorPrice::Hourly { prices } => prices.len() == 24 && prices.iter().all(|p| p.is_finite() && *p > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "anchor prices must be positive (and 24 when hourly): {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PvScaling {
    /// Scale all PV so its energy over the window equals the load energy.
    MatchLoad,
    AsIs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioRecipe {
    pub agents: usize,
    pub horizon: usize,
    /// First hour of the window, as an offset into the profiles.
    pub start: usize,
    /// Elasticities are drawn uniformly from `[lo, hi]`, one per agent.
    pub elasticity: (f64, f64),
    /// Total battery capacity split across agents (kWh); zero for none.
    pub total_capacity: f64,
    /// Power limit of every battery (kW).
    pub battery_power: f64,
    /// Initial state of charge as a fraction of capacity.
    pub initial_soc: f64,
    /// Give every agent the same share instead of random normalized fractions.
    pub even_split: bool,
    pub pv_scaling: PvScaling,
    pub anchor: AnchorPrice,
    pub seed: u64,
}

impl Default for ScenarioRecipe {
    fn default() -> Self {
        Self {
            agents: 2,
            horizon: 24,
            start: 0,
            elasticity: (-1.5, -0.5),
            total_capacity: 0.0,
            battery_power: 1.0,
            initial_soc: 0.5,
            even_split: false,
            pv_scaling: PvScaling::MatchLoad,
            anchor: AnchorPrice::TimeOfUse,
            seed: 0,
        }
    }
}

impl ScenarioRecipe {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.elasticity;
        if !(lo <= hi && hi < 0.0 && lo.is_finite()) {
            return Err(Error::Config(format!(
                "elasticity range [{lo}, {hi}] must satisfy lo ≤ hi < 0"
            )));
        }
        if self.agents < 2 || self.horizon == 0 {
            return Err(Error::Config("a scenario needs at least 2 agents and 1 period".into()));
        }
        if !(self.total_capacity.is_finite() && self.total_capacity >= 0.0) {
            return Err(Error::Config(format!(
                "total capacity {} must be ≥ 0",
                self.total_capacity
            )));
        }
        if !(self.battery_power.is_finite() && self.battery_power >= 0.0) {
            return Err(Error::Config(format!(
                "battery power {} must be ≥ 0",
                self.battery_power
            )));
        }
        if !(0.0..=1.0).contains(&self.initial_soc) {
            return Err(Error::Config(format!(
                "initial_soc {} outside [0, 1]",
                self.initial_soc
            )));
        }
        self.anchor.validate()
    }
}

/// Builds a scenario from a window of the profiles. The same recipe and
/// profiles always give the same scenario.
pub fn generate_scenario(p: &ProfileSet, r: &ScenarioRecipe) -> Result<Scenario> {
    r.validate()?;
    if r.agents > p.agent_count() {
        return Err(Error::Window(format!(
            "{} agents requested, profiles have {}",
            r.agents,
            p.agent_count()
        )));
    }
    if r.start + r.horizon > p.hours() {
        return Err(Error::Window(format!(
            "hours {}..{} requested, profiles cover 0..{}",
            r.start,
            r.start + r.horizon,
            p.hours()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let mut chosen = index::sample(&mut rng, p.agent_count(), r.agents).into_vec();
    chosen.sort_unstable();
    let (lo, hi) = r.elasticity;
    let elasticity: Vec<f64> = chosen.iter().map(|_| rng.gen_range(lo..=hi)).collect();
    let shares: Vec<f64> = if r.even_split {
        vec![1.0 / r.agents as f64; r.agents]
    } else {
        let raw: Vec<f64> = chosen.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        if sum > 0.0 {
            raw.iter().map(|x| x / sum).collect()
        } else {
            vec![1.0 / r.agents as f64; r.agents]
        }
    };

    let window = r.start..r.start + r.horizon;
    let scale = match r.pv_scaling {
        PvScaling::AsIs => 1.0,
        PvScaling::MatchLoad => {
            let load: f64 = chosen
                .iter()
                .map(|&i| p.load[i][window.clone()].iter().sum::<f64>())
                .sum();
            let pv: f64 = chosen
                .iter()
                .map(|&i| p.pv[i][window.clone()].iter().sum::<f64>())
                .sum();
            if pv <= 0.0 {
                return Err(Error::Window(format!(
                    "no PV output in hours {}..{} to scale",
                    window.start, window.end
                )));
            }
            load / pv
        }
    };

    let agents = chosen
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let utility = window
                .clone()
                .map(|h| {
                    let pi0 = r.anchor.at_hour(p.timestamp(h).hour());
                    QuasiCpeUtility::with_default_shift(pi0, p.load[i][h].max(MIN_ANCHOR_DEMAND), elasticity[k])
                })
                .collect::<Result<Vec<_>>>()?;
            let solar = window.clone().map(|h| p.pv[i][h] * scale).collect();
            let capacity = shares[k] * r.total_capacity;
            let battery = (capacity > 0.0)
                .then(|| IdealBattery::new(r.battery_power, capacity, r.initial_soc * capacity, 1.0))
                .transpose()?
                .map(BatteryModel::Ideal);
            Ok(AgentSpec {
                id: p.agent_ids[i].clone(),
                utility,
                solar,
                battery,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sc = Scenario {
        horizon: r.horizon,
        dt: 1.0,
        agents,
    };
    sc.validate()?;
    Ok(sc)
}
