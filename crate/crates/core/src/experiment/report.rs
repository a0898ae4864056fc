//! Plot-ready CSV and machine-readable JSON output.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MultiAgentReport, SweepCell};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, BufWriter::new(file)))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => Error::Config(format!("cannot write {}: {kind:?}", path.display())),
    }
}

fn write_rows<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<PathBuf> {
    let (path, out) = create(dir, name)?;
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let (path, mut out) = create(dir, name)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")
        .and_then(|()| out.flush())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Serialize)]
struct SweepRow {
    gamma: f64,
    delta0: f64,
    mean_iters: f64,
    max_iters: usize,
}

/// `gamma_sweep.csv` (gamma,delta0,mean_iters,max_iters) or `gamma_sweep.json`.
pub fn write_gamma_sweep(dir: &Path, cells: &[SweepCell], format: ReportFormat) -> Result<Vec<PathBuf>> {
    Ok(vec![match format {
        ReportFormat::Csv => {
            let rows: Vec<SweepRow> = cells
                .iter()
                .map(|c| SweepRow {
                    gamma: c.gamma,
                    delta0: c.delta0,
                    mean_iters: c.mean_iters,
                    max_iters: c.max_iters,
                })
                .collect();
            write_rows(dir, "gamma_sweep.csv", &rows)?
        }
        ReportFormat::Json => write_json(dir, "gamma_sweep.json", &cells)?,
    }])
}

/// Per-trial rows, welfare by horizon, iteration quartiles by capacity, and
/// the special-instance table as CSV, or everything in `multiagent.json`.
pub fn write_multiagent(dir: &Path, report: &MultiAgentReport, format: ReportFormat) -> Result<Vec<PathBuf>> {
    match format {
        ReportFormat::Csv => {
            let mut paths = vec![
                write_rows(dir, "trials.csv", &report.trials)?,
                write_rows(dir, "welfare_by_T.csv", &report.by_horizon)?,
                write_rows(dir, "iterations_by_capacity.csv", &report.by_capacity)?,
            ];
            if let Some((_, rows)) = &report.special_instance {
                paths.push(write_rows(dir, "special_instance.csv", rows)?);
            }
            Ok(paths)
        }
        ReportFormat::Json => Ok(vec![write_json(dir, "multiagent.json", report)?]),
    }
}
