//! Seeded synthetic household profiles: a two-peak daily load and a
//! sinusoidal daylight PV curve with day-to-day cloud cover.

use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::profiles::ProfileSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticProfiles {
    pub agents: usize,
    pub hours: usize,
    pub start: NaiveDateTime,
    /// Probability that a household has no PV.
    pub no_pv_share: f64,
    pub seed: u64,
}

impl Default for SyntheticProfiles {
    fn default() -> Self {
        Self {
            agents: 10,
            hours: 8760,
            start: NaiveDate::from_ymd_opt(2017, 1, 1)
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .expect("valid date"),
            no_pv_share: 0.2,
            seed: 0,
        }
    }
}

fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    let z = (hour - centre) / width;
    (-0.5 * z * z).exp()
}

impl SyntheticProfiles {
    pub fn generate(&self) -> Result<ProfileSet> {
        if self.agents == 0 || self.hours == 0 {
            return Err(Error::Config(
                "synthetic profiles need at least one agent and one hour".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.no_pv_share) {
            return Err(Error::Config(format!(
                "no_pv_share {} outside [0, 1]",
                self.no_pv_share
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let days = self.hours.div_ceil(24) + 1;
        // One cloud factor per calendar day, shared by the neighbourhood.
        let clouds: Vec<f64> = (0..days).map(|_| rng.gen_range(0.3..1.0)).collect();
        let mut load = Vec::with_capacity(self.agents);
        let mut pv = Vec::with_capacity(self.agents);
        for _ in 0..self.agents {
            let base = rng.gen_range(0.3..0.8);
            let morning = rng.gen_range(0.3..1.0);
            let evening = rng.gen_range(0.8..2.0);
            let capacity = if rng.gen_bool(self.no_pv_share) {
                0.0
            } else {
                rng.gen_range(2.0..8.0)
            };
            let mut l = Vec::with_capacity(self.hours);
            let mut p = Vec::with_capacity(self.hours);
            for h in 0..self.hours {
                let ts = self.start + chrono::Duration::hours(h as i64);
                let hour = f64::from(ts.hour()) + 0.5;
                let doy = f64::from(ts.ordinal0());
                // Cooling load peaks in late July.
                let season = 1.0 + 0.3 * (2.0 * PI * (doy - 200.0) / 365.0).cos();
                let shape = base + morning * bump(hour, 7.5, 1.5) + evening * bump(hour, 19.0, 2.0);
                let noise = 1.0 + 0.15 * rng.gen_range(-1.0..1.0);
                l.push((shape * season * noise).max(0.05));

                let daylight = 12.0 + 2.5 * (2.0 * PI * (doy - 172.0) / 365.0).cos();
                let rise = 12.5 - daylight / 2.0;
                let sun = (PI * (hour - rise) / daylight).sin().max(0.0);
                let day = (h + self.start.hour() as usize) / 24;
                p.push(capacity * sun * clouds[day] * rng.gen_range(0.9..1.0));
            }
            load.push(l);
            pv.push(p);
        }
        let ids = (0..self.agents).map(|i| format!("h{i:03}")).collect();
        ProfileSet::new(self.start, ids, load, pv)
    }
}
