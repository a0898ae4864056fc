//! Hourly load and PV profiles and their CSV form.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROFILE_HEADER: [&str; 4] = ["timestamp", "agent_id", "load_kwh", "pv_kw"];
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Per-agent hourly load (kWh) and PV capacity (kW) on a uniform hourly index
/// starting at `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub start: NaiveDateTime,
    pub agent_ids: Vec<String>,
    /// `load[agent][hour]`.
    pub load: Vec<Vec<f64>>,
    /// `pv[agent][hour]`.
    pub pv: Vec<Vec<f64>>,
}

impl ProfileSet {
    pub fn new(start: NaiveDateTime, agent_ids: Vec<String>, load: Vec<Vec<f64>>, pv: Vec<Vec<f64>>) -> Result<Self> {
        let set = Self {
            start,
            agent_ids,
            load,
            pv,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.agent_ids.len();
        if n == 0 || self.load.len() != n || self.pv.len() != n {
            return Err(Error::domain(
                "profiles need at least one agent and one series of each kind per agent",
            ));
        }
        let hours = self.hours();
        for (i, id) in self.agent_ids.iter().enumerate() {
            if self.load[i].len() != hours || self.pv[i].len() != hours {
                return Err(Error::domain(format!("agent {id} has series of unequal length")));
            }
            let ok = |v: &f64| v.is_finite() && *v >= 0.0;
            if !self.load[i].iter().all(ok) || !self.pv[i].iter().all(ok) {
                return Err(Error::domain(format!("agent {id} has a negative or non-finite value")));
            }
        }
        Ok(())
    }

    pub fn hours(&self) -> usize {
        self.load.first().map_or(0, Vec::len)
    }

    pub fn agent_count(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn timestamp(&self, hour: usize) -> NaiveDateTime {
        self.start + Duration::hours(hour as i64)
    }

    /// Rows sorted by (timestamp, agent_id).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut order: Vec<usize> = (0..self.agent_count()).collect();
        order.sort_by(|&a, &b| self.agent_ids[a].cmp(&self.agent_ids[b]));
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(PROFILE_HEADER)?;
        for h in 0..self.hours() {
            let ts = self.timestamp(h).format(TIMESTAMP_FORMAT).to_string();
            for &i in &order {
                w.write_record([
                    ts.as_str(),
                    self.agent_ids[i].as_str(),
                    &self.load[i][h].to_string(),
                    &self.pv[i][h].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// Accepts `YYYY-MM-DDTHH:MM:SS`, optionally with an offset, which is dropped
/// after conversion to UTC.
fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    s.parse::<NaiveDateTime>()
        .ok()
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|t| t.naive_utc()))
}

/// Reads and validates a profile file.
pub fn load_profiles(path: &Path) -> Result<ProfileSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_profiles(file, path)
}

/// Parses profile CSV from any reader; `path` labels errors.
pub fn read_profiles<R: Read>(reader: R, path: &Path) -> Result<ProfileSet> {
    let err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(PROFILE_HEADER) {
        return Err(err(1, format!("expected header {}", PROFILE_HEADER.join(","))));
    }

    let mut start: Option<NaiveDateTime> = None;
    let mut agent_ids: Vec<String> = Vec::new();
    let mut load: Vec<Vec<f64>> = Vec::new();
    let mut pv: Vec<Vec<f64>> = Vec::new();
    // Agents seen at the current timestamp, in file order.
    let mut current: Option<(NaiveDateTime, Vec<String>)> = None;
    let mut first_block = true;
    let mut last_line = 1;

    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        last_line = line;
        let record = record.map_err(|e| err(line, e.to_string()))?;
        if record.len() != 4 {
            return Err(err(line, format!("expected 4 fields, found {}", record.len())));
        }
        let ts = parse_timestamp(record[0].trim())
            .ok_or_else(|| err(line, format!("invalid timestamp {:?}", &record[0])))?;
        let id = record[1].trim().to_string();
        if id.is_empty() {
            return Err(err(line, "empty agent_id".into()));
        }
        let number = |idx: usize, name: &str| -> Result<f64> {
            let v: f64 = record[idx]
                .trim()
                .parse()
                .map_err(|_| err(line, format!("invalid {name} {:?}", &record[idx])))?;
            if !v.is_finite() {
                return Err(err(line, format!("non-finite {name}")));
            }
            if v < 0.0 {
                return Err(err(line, format!("negative {name} {v} for agent {id}")));
            }
            Ok(v)
        };
        let l = number(2, "load_kwh")?;
        let p = number(3, "pv_kw")?;

        match &mut current {
            Some((cur_ts, seen)) if *cur_ts == ts => {
                if seen.last().is_some_and(|last| *last >= id) {
                    return Err(err(line, format!("rows not sorted by agent_id at {id}")));
                }
                seen.push(id.clone());
            }
            Some((cur_ts, seen)) => {
                let expected = *cur_ts + Duration::hours(1);
                if ts < expected {
                    return Err(err(line, format!("rows not sorted by timestamp at {ts}")));
                }
                if ts > expected {
                    return Err(err(line, format!("gap in timestamps: expected {expected}, found {ts}")));
                }
                close_block(&agent_ids, seen, first_block).map_err(|m| err(line - 1, m))?;
                first_block = false;
                *cur_ts = ts;
                seen.clear();
                seen.push(id.clone());
            }
            None => {
                start = Some(ts);
                current = Some((ts, vec![id.clone()]));
            }
        }

        let idx = if first_block {
            agent_ids.push(id);
            load.push(Vec::new());
            pv.push(Vec::new());
            agent_ids.len() - 1
        } else {
            agent_ids
                .iter()
                .position(|a| *a == id)
                .ok_or_else(|| err(line, format!("agent {id} absent from the first timestamp")))?
        };
        load[idx].push(l);
        pv[idx].push(p);
    }

    let Some((_, seen)) = current else {
        return Err(err(1, "no data rows".into()));
    };
    close_block(&agent_ids, &seen, first_block).map_err(|m| err(last_line, m))?;
    ProfileSet::new(start.expect("set with the first row"), agent_ids, load, pv)
}

/// Every timestamp must list exactly the agents of the first one.
fn close_block(agent_ids: &[String], seen: &[String], first: bool) -> std::result::Result<(), String> {
    if first || seen == agent_ids {
        return Ok(());
    }
    let missing: Vec<&str> = agent_ids
        .iter()
        .filter(|a| !seen.contains(a))
        .map(String::as_str)
        .collect();
    Err(format!("timestamp block is missing agents {missing:?}"))
}
