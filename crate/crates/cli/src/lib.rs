//! `skyseg` command-line runner.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use skyseg_core::scenario::{run_scenario, MissionReport, MissionSummary, ScenarioConfig};
use skyseg_core::Error;

const ENV_HELP: &str = "Environment:\n  SKYSEG_LOG  log filter (error, warn, info, debug, trace) [default: warn]";

fn defaults_help() -> String {
    format!(
        "Every key below can be set in the config file or with --set KEY=VALUE.\n\
         Defaults:\n{}\n\n{ENV_HELP}",
        ScenarioConfig::default().to_json()
    )
}

#[derive(Debug, Parser)]
#[command(name = "skyseg", version, about = "Leader-follower collaborative segmentation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one mission and write its report files.
    #[command(after_help = defaults_help())]
    Run(RunArgs),
    /// Run the Cartesian product of axis values, one report per cell.
    #[command(after_help = defaults_help())]
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fusion {
    Replace,
    Prob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Selection {
    Random,
    Order,
    Reorder,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Tta {
    Off,
    Local,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Aggregate {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Corruption {
    None,
    Snow,
    Fog,
    Frost,
}

#[derive(Debug, Clone, Args)]
pub struct Overrides {
    /// Scenario config file (JSON); missing keys take their defaults
    #[arg(value_name = "CONFIG")]
    pub config_path: Option<PathBuf>,
    /// Same as the positional CONFIG
    #[arg(long = "config", value_name = "PATH", conflicts_with = "config_path")]
    pub config: Option<PathBuf>,
    /// Master seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of followers, at most 4 [default: 3]
    #[arg(long)]
    pub followers: Option<usize>,
    /// Fusion rule [default: prob]
    #[arg(long, value_enum)]
    pub fusion: Option<Fusion>,
    /// Patch selection method [default: attention]
    #[arg(long, value_enum)]
    pub selection: Option<Selection>,
    /// Test-time adaptation mode [default: cross]
    #[arg(long, value_enum)]
    pub tta: Option<Tta>,
    /// Peer statistic aggregation [default: mean]
    #[arg(long, value_enum)]
    pub aggregate: Option<Aggregate>,
    /// Weather corruption [default: none]
    #[arg(long, value_enum)]
    pub corruption: Option<Corruption>,
    /// Corruption severity 0..5 [default: 0]
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=5))]
    pub severity: Option<u8>,
    /// Mission length [default: 10]
    #[arg(long)]
    pub rounds: Option<u32>,
    /// Any config key, e.g. `network.bandwidth=5e6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory
    #[arg(long, default_value = "skyseg-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Axis as `key=v1,v2,...`, e.g. `followers=1,2,3`. Repeatable.
    #[arg(long = "axis", value_name = "KEY=VALUES", required = true)]
    pub axes: Vec<String>,
}

fn value_name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value().expect("no skipped variants").get_name().to_string()
}

impl Overrides {
    /// Loads the config file (or defaults) and applies every flag.
    pub fn resolve(&self) -> Result<ScenarioConfig> {
        let mut cfg = match self.config.as_ref().or(self.config_path.as_ref()) {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ScenarioConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ScenarioConfig::default(),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("followers", self.followers.map(|v| v.to_string()));
        push("fusion", self.fusion.map(value_name));
        push("selection", self.selection.map(value_name));
        push("tta", self.tta.map(value_name));
        push("aggregate", self.aggregate.map(value_name));
        push("corruption", self.corruption.map(value_name));
        push("severity", self.severity.map(|v| v.to_string()));
        push("rounds", self.rounds.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = split_pair(kv)?;
            pairs.push((k.to_string(), v.to_string()));
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn split_pair(kv: &str) -> Result<(&str, &str)> {
    match kv.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k, v)),
        _ => Err(Error::Config(format!("expected KEY=VALUE, got `{kv}`")).into()),
    }
}

/// 2 for configuration problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::Parameter(_)) => 2,
        _ => 1,
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.overrides.resolve()?;
            let report = run_scenario(cfg)?;
            write_report(&args.overrides.out, &report)?;
            let s = &report.summary;
            println!(
                "{} rounds: mIoU coarse {:.2} fused {:.2}, mean latency {:.3} s, {} bytes -> {}",
                s.rounds,
                s.mean_miou_coarse,
                s.mean_miou_fused,
                s.mean_latency,
                s.total_bytes,
                args.overrides.out.display()
            );
            Ok(())
        }
        Command::Sweep(args) => {
            let base = args.overrides.resolve()?;
            let axes = parse_axes(&args.axes)?;
            let rows = sweep(&base, &axes, &args.overrides.out)?;
            println!("{} cells -> {}", rows.len(), args.overrides.out.display());
            Ok(())
        }
    }
}

pub type Axis = (String, Vec<String>);

pub fn parse_axes(specs: &[String]) -> Result<Vec<Axis>> {
    if specs.is_empty() {
        bail!(Error::Config("sweep needs at least one --axis".into()));
    }
    specs
        .iter()
        .map(|spec| {
            let (k, v) = split_pair(spec)?;
            let values: Vec<String> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
            if values.is_empty() {
                bail!(Error::Config(format!("axis `{k}` has no values")));
            }
            Ok((k.to_string(), values))
        })
        .collect()
}

/// Cartesian product of axis values, first axis varying slowest.
pub fn cells(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, (key, values)| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push((key.clone(), v.clone()));
                    cell
                })
            })
            .collect()
    })
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub cell: String,
    pub values: Vec<(String, String)>,
    pub summary: MissionSummary,
}

pub fn sweep(base: &ScenarioConfig, axes: &[Axis], out: &Path) -> Result<Vec<SweepRow>> {
    let grid = cells(axes);
    // Validate every cell before running any of them.
    let configs = grid
        .iter()
        .map(|cell| {
            let mut cfg = base.clone();
            for (k, v) in cell {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let rows = grid
        .into_par_iter()
        .zip(configs)
        .map(|(cell, cfg)| {
            let name = cell.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",");
            log::info!("sweep cell {name}");
            let report = run_scenario(cfg)?;
            write_report(&out.join(&name), &report)?;
            Ok(SweepRow { cell: name, values: cell, summary: report.summary })
        })
        .collect::<Result<Vec<_>>>()?;
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    write_atomic(&out.join("summary.csv"), summary_csv(axes, &rows).as_bytes())?;
    Ok(rows)
}

pub fn summary_csv(axes: &[Axis], rows: &[SweepRow]) -> String {
    let mut out: String = axes.iter().map(|(k, _)| format!("{k},")).collect();
    out.push_str(
        "rounds,mean_miou_coarse,mean_miou_fused,mean_latency,refinement_payload_bytes_per_round,\
         stat_value_bytes_per_follower,stat_count_bytes_per_round,total_bytes,lost_messages\n",
    );
    for r in rows {
        let s = &r.summary;
        for (_, v) in &r.values {
            out.push_str(v);
            out.push(',');
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.rounds,
            s.mean_miou_coarse,
            s.mean_miou_fused,
            s.mean_latency,
            s.refinement_payload_bytes_per_round,
            s.stat_value_bytes_per_follower,
            s.stat_count_bytes_per_round,
            s.total_bytes,
            s.lost_messages
        ));
    }
    out
}

pub fn write_report(dir: &Path, report: &MissionReport) -> Result<()> {
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&dir.join("rounds.csv"), report.to_csv().as_bytes())?;
    write_atomic(&dir.join("messages.log"), report.message_log().as_bytes())?;
    Ok(())
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
