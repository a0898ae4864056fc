//! `microgrid`: centralized dispatch, peer-to-peer negotiation and the
//! batch experiments, driven by JSON configs and writing CSV or JSON.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use microgrid_core::dispatch::{solve_centralized, solve_centralized_ext, DispatchSolution, Scenario};
use microgrid_core::experiment::{
    run_gamma_sweep, run_multiagent_experiment, write_gamma_sweep, write_multiagent, GammaSweepConfig,
    MultiAgentConfig, ReportFormat,
};
use microgrid_core::negotiation::{run_negotiation, settle, AgentSettlement, NegotiationConfig, TradeLedger};
use microgrid_core::{generate_scenario, Error, ProfileSource, ScenarioRecipe, SyntheticProfiles};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "microgrid",
    version,
    about = "Economic dispatch and peer-to-peer trading for solar microgrids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Welfare-maximizing dispatch of one scenario.
    Dispatch(Common),
    /// Peer-to-peer negotiation of one scenario, with per-agent settlement.
    Negotiate(Common),
    /// Iterations to converge over a grid of (gamma, delta0).
    SweepGamma(Common),
    /// Welfare gap and iterations over battery capacities and powers.
    ExperimentMultiagent(Common),
    /// Synthetic household load and PV profiles.
    GenProfiles(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults apply to every omitted field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

/// A scenario given inline, or drawn from profiles by a recipe.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScenarioConfig {
    scenario: Option<Scenario>,
    recipe: ScenarioRecipe,
    profiles: ProfileSource,
    negotiation: NegotiationConfig,
}

impl ScenarioConfig {
    fn build(mut self, seed: Option<u64>) -> Result<(Scenario, NegotiationConfig), Error> {
        let sc = match self.scenario {
            Some(sc) => sc,
            None => {
                if let Some(seed) = seed {
                    self.recipe.seed = seed;
                }
                generate_scenario(&self.profiles.load()?, &self.recipe)?
            }
        };
        Ok((sc, self.negotiation))
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Error> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>), Error> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join(name);
    let file = File::create(&path).map_err(io(&path))?;
    Ok((path, BufWriter::new(file)))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, Error> {
    let (path, mut out) = create(dir, name)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")
        .and_then(|()| out.flush())
        .map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
    Ok(path)
}

fn write_rows<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<PathBuf, Error> {
    let (path, out) = create(dir, name)?;
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

#[derive(Serialize)]
struct DispatchRow<'a> {
    agent_id: &'a str,
    t: usize,
    price: f64,
    demand: f64,
    solar: f64,
    discharge: f64,
    charge: f64,
    soc: Option<f64>,
}

fn dispatch_rows<'a>(sc: &'a Scenario, sol: &DispatchSolution) -> Vec<DispatchRow<'a>> {
    let mut rows = Vec::new();
    for (spec, a) in sc.agents.iter().zip(&sol.agents) {
        for t in 0..sc.horizon {
            let b = a.battery.as_ref();
            rows.push(DispatchRow {
                agent_id: &spec.id,
                t,
                price: sol.price[t],
                demand: a.demand[t],
                solar: a.solar[t],
                discharge: b.map_or(0.0, |b| b.discharge[t]),
                charge: b.map_or(0.0, |b| b.charge[t]),
                soc: b.map(|b| b.soc[t]),
            });
        }
    }
    rows
}

fn dispatch(args: &Common) -> anyhow::Result<Vec<PathBuf>> {
    let (sc, _) = read_config::<ScenarioConfig>(args.config.as_deref())?.build(args.seed)?;
    let sol = if sc.has_extended_batteries() {
        solve_centralized_ext(&sc)?
    } else {
        solve_centralized(&sc)?
    };
    println!(
        "welfare {:.6} over {} agents and {} periods (kkt residual {:.1e})",
        sol.welfare,
        sc.agents.len(),
        sc.horizon,
        sol.kkt_residual
    );
    Ok(match args.format {
        Format::Csv => vec![write_rows(&args.out, "dispatch.csv", &dispatch_rows(&sc, &sol))?],
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                scenario: &'a Scenario,
                solution: &'a DispatchSolution,
            }
            let out = Out {
                scenario: &sc,
                solution: &sol,
            };
            vec![write_json(&args.out, "dispatch.json", &out)?]
        }
    })
}

#[derive(Serialize)]
struct SettlementRow<'a> {
    agent_id: &'a str,
    no_trade: f64,
    realized: f64,
    utility: f64,
    payment: f64,
    slack: f64,
}

impl<'a> From<&'a AgentSettlement> for SettlementRow<'a> {
    fn from(a: &'a AgentSettlement) -> Self {
        SettlementRow {
            agent_id: &a.agent_id,
            no_trade: a.no_trade,
            realized: a.realized,
            utility: a.utility,
            payment: a.payment,
            slack: a.slack(),
        }
    }
}

fn negotiate(args: &Common) -> anyhow::Result<Vec<PathBuf>> {
    let (sc, cfg) = read_config::<ScenarioConfig>(args.config.as_deref())?.build(args.seed)?;
    let ledger = run_negotiation(&sc, &cfg)?;
    let report = settle(&sc, &ledger)?;
    println!(
        "{} after {} iterations: welfare {:.6} (no trade {:.6}), smallest gain {:.2e}",
        if ledger.converged() {
            "converged"
        } else {
            "stopped at the iteration limit"
        },
        ledger.iterations,
        report.welfare,
        report.no_trade_welfare,
        report.min_slack()
    );
    Ok(match args.format {
        Format::Csv => {
            let (path, out) = create(&args.out, "ledger.csv")?;
            ledger.write_csv(out)?;
            let rows: Vec<SettlementRow> = report.agents.iter().map(SettlementRow::from).collect();
            vec![path, write_rows(&args.out, "settlement.csv", &rows)?]
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                ledger: &'a TradeLedger,
                settlement: &'a microgrid_core::negotiation::SettlementReport,
            }
            let out = Out {
                ledger: &ledger,
                settlement: &report,
            };
            vec![write_json(&args.out, "negotiation.json", &out)?]
        }
    })
}

fn sweep_gamma(args: &Common) -> anyhow::Result<Vec<PathBuf>> {
    let mut cfg: GammaSweepConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let cells = run_gamma_sweep(&cfg)?;
    if let Some(best) = cells.iter().min_by(|a, b| a.mean_iters.total_cmp(&b.mean_iters)) {
        println!(
            "{} cells; fewest mean iterations {:.1} at gamma {} delta0 {}",
            cells.len(),
            best.mean_iters,
            best.gamma,
            best.delta0
        );
    }
    Ok(write_gamma_sweep(&args.out, &cells, args.format.into())?)
}

fn experiment_multiagent(args: &Common) -> anyhow::Result<Vec<PathBuf>> {
    let mut cfg: MultiAgentConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let report = run_multiagent_experiment(&cfg)?;
    let converged = report.trials.iter().filter(|t| t.converged).count();
    let pareto = report.trials.iter().filter(|t| t.weak_pareto).count();
    println!(
        "{} trials: {converged} converged, {pareto} weak-Pareto",
        report.trials.len()
    );
    for h in &report.by_horizon {
        if let Some(mean) = h.mean_dw_pct {
            println!("  T = {:>2}: mean welfare gap {mean:.4}%", h.horizon);
        }
    }
    Ok(write_multiagent(&args.out, &report, args.format.into())?)
}

fn gen_profiles(args: &Common) -> anyhow::Result<Vec<PathBuf>> {
    let mut cfg: SyntheticProfiles = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let set = cfg.generate()?;
    println!("{} agents, {} hours from {}", set.agent_count(), set.hours(), set.start);
    Ok(match args.format {
        Format::Csv => {
            fs::create_dir_all(&args.out).map_err(|source| Error::Io {
                path: args.out.clone(),
                source,
            })?;
            let path = args.out.join("profiles.csv");
            set.save(&path)?;
            vec![path]
        }
        Format::Json => vec![write_json(&args.out, "profiles.json", &set)?],
    })
}

/// 2 for bad input, 3 for I/O failures, 1 for anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Domain(_) | Error::Parse { .. } | Error::Window(_)) => 2,
        Some(Error::Io { .. }) => 3,
        Some(Error::Csv(c)) if c.is_io_error() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Dispatch(a) => dispatch(a),
        Command::Negotiate(a) => negotiate(a),
        Command::SweepGamma(a) => sweep_gamma(a),
        Command::ExperimentMultiagent(a) => experiment_multiagent(a),
        Command::GenProfiles(a) => gen_profiles(a),
    };
    match result {
        Ok(paths) => {
            for p in paths {
                log::info!("wrote {}", p.display());
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
