//! `kvsim` command-line front end.
//!
//! Every command writes its files into the output directory through a
//! temporary file and a rename, so readers never observe partial output.
//! Failures print one JSON object on stderr and exit nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use kvsim::config::{ConfigError, ExperimentConfig, ResolvedConfig};
use kvsim::experiment::{self, ExperimentError, Meta, PointResult};

#[derive(Parser, Debug)]
#[command(name = "kvsim", version, about = "Simulate multi-instance LLM serving with redundant KV caches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate every configured policy at the first configured rate.
    Run(Common),
    /// Simulate every (policy, rate) pair and mark each policy's saturation rate.
    Sweep(Common),
    /// Emit perf-model latency and throughput tables; no simulation.
    Curves(Common),
    /// Vary HBM capacity or link bandwidth and report each policy's knee.
    ResourceSweep(Common),
    /// Check a config and print its resolved form.
    ValidateConfig(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the event log of every simulated point as JSON lines.
    #[arg(long)]
    emit_events: bool,
}

fn load(args: &Common) -> Result<ResolvedConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut cfg = ExperimentConfig::from_json(&text)?;
            // Trace paths are relative to the config file.
            if let (Some(trace), Some(dir)) = (&cfg.trace, path.parent()) {
                if trace.is_relative() {
                    cfg.trace = Some(dir.join(trace));
                }
            }
            cfg
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if args.emit_events {
        cfg.output.emit_events = true;
    }
    Ok(cfg.resolve()?)
}

/// Writes `contents` to `dir/name` via a sibling temporary file.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, &target).with_context(|| format!("renaming to {}", target.display()))?;
    info!("wrote {}", target.display());
    Ok(())
}

fn pretty(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("json serializes") + "\n"
}

fn prepare(cfg: &ResolvedConfig) -> Result<(PathBuf, Meta)> {
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let meta = Meta::of(cfg);
    let config: serde_json::Value = serde_json::from_str(&cfg.to_json())?;
    write_atomic(&dir, "meta.json", &pretty(&json!({ "meta": meta, "config": config })))?;
    Ok((dir, meta))
}

fn write_events(dir: &Path, meta: &Meta, points: &[PointResult]) -> Result<()> {
    for p in points {
        let Some(lines) = p.raw.events_jsonl() else {
            continue;
        };
        let head = json!({ "meta": meta, "policy": p.policy.as_str(), "rate": p.rate }).to_string();
        let name = format!("events-{}-{}.jsonl", p.policy.as_str(), p.rate);
        write_atomic(dir, &name, &format!("{head}\n{lines}"))?;
    }
    Ok(())
}

fn cmd_run(cfg: &ResolvedConfig) -> Result<()> {
    let (dir, meta) = prepare(cfg)?;
    let points = experiment::run(cfg)?;
    for p in &points {
        info!(
            "{} at {} req/s: {} completed, cost efficiency {:.1}",
            p.policy.as_str(),
            p.rate,
            p.report.completed,
            p.report.cost_efficiency
        );
    }
    write_atomic(&dir, "report.json", &pretty(&json!({ "meta": meta, "points": points })))?;
    write_atomic(&dir, "summary.csv", &experiment::summary_csv(&meta, &points)?)?;
    write_events(&dir, &meta, &points)
}

fn cmd_sweep(cfg: &ResolvedConfig) -> Result<()> {
    let (dir, meta) = prepare(cfg)?;
    let result = experiment::sweep(cfg)?;
    for s in &result.saturation {
        info!("{} saturates at {} req/s", s.policy.as_str(), s.rate);
    }
    write_atomic(&dir, "sweep.csv", &result.long_csv(&meta)?)?;
    if let Some(table) = result.comparison_csv(&meta)? {
        write_atomic(&dir, "comparison.csv", &table)?;
    }
    write_atomic(&dir, "summary.csv", &experiment::summary_csv(&meta, &result.points)?)?;
    write_atomic(
        &dir,
        "report.json",
        &pretty(&json!({ "meta": meta, "points": result.points, "saturation": result.saturation })),
    )?;
    write_events(&dir, &meta, &result.points)
}

fn cmd_curves(cfg: &ResolvedConfig) -> Result<()> {
    let (dir, meta) = prepare(cfg)?;
    write_atomic(&dir, "curves.csv", &experiment::curves_csv(cfg, &meta)?)
}

fn cmd_resource_sweep(cfg: &ResolvedConfig) -> Result<()> {
    let result = experiment::resource_sweep(cfg)?
        .ok_or_else(|| ConfigError::Invalid("resource_sweep section is required".into()))?;
    let (dir, meta) = prepare(cfg)?;
    for k in &result.knees {
        info!("{} knee {:?}", k.policy.as_str(), k.knee);
    }
    write_atomic(&dir, "resource_sweep.csv", &result.points_csv(&meta)?)?;
    write_atomic(&dir, "knees.csv", &result.knees_csv(&meta)?)?;
    write_atomic(&dir, "report.json", &pretty(&json!({ "meta": meta, "result": result })))
}

fn cmd_validate(cfg: &ResolvedConfig) -> Result<()> {
    let config: serde_json::Value = serde_json::from_str(&cfg.to_json())?;
    print!("{}", pretty(&json!({ "valid": true, "meta": Meta::of(cfg), "config": config })));
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let (args, f): (&Common, fn(&ResolvedConfig) -> Result<()>) = match &cli.command {
        Command::Run(a) => (a, cmd_run),
        Command::Sweep(a) => (a, cmd_sweep),
        Command::Curves(a) => (a, cmd_curves),
        Command::ResourceSweep(a) => (a, cmd_resource_sweep),
        Command::ValidateConfig(a) => (a, cmd_validate),
    };
    let cfg = load(args)?;
    f(&cfg)
}

/// Error category and exit code.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    if err.downcast_ref::<ConfigError>().is_some() {
        return ("config", 2);
    }
    match err.downcast_ref::<ExperimentError>() {
        Some(ExperimentError::Trace(_)) => ("trace", 2),
        Some(_) => ("simulation", 1),
        None => ("io", 1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KVSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let message = format!("{err:#}");
            eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
            ExitCode::from(code)
        }
    }
}
