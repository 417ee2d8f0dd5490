//! Command-line interface: run one episode, sweep a (mode, speed, rho) grid,
//! or validate a track file.
//!
//! Exit codes: 0 success, 2 configuration error, 3 internal error.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gatenav::bench::{
    emit_results, parse_track_file, run_sweep, SweepSpec, TableFormat, TrackFile,
};
use gatenav::sim::{run_episode, PlannerMode};
use gatenav::Error;

#[derive(Parser)]
#[command(name = "gatenav", about = "Gate-racing simulation and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single episode and print its outcome.
    Run(RunArgs),
    /// Run a sweep over speeds and perturbation radii.
    Sweep(SweepArgs),
    /// Validate a track file.
    Check(CheckArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Track file (TOML).
    #[arg(long)]
    track: PathBuf,
    /// Commanded speed, m/s.
    #[arg(long)]
    speed: f64,
    /// Gate perturbation radius, meters.
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    /// Episode seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Planner mode: full or baseline.
    #[arg(long, default_value = "full")]
    mode: PlannerMode,
    /// Write the trajectory log (JSON lines) to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Track file (TOML).
    #[arg(long)]
    track: PathBuf,
    /// Comma-separated commanded speeds, m/s.
    #[arg(long, value_delimiter = ',', required = true)]
    speeds: Vec<f64>,
    /// Comma-separated perturbation radii, meters.
    #[arg(long, value_delimiter = ',', required = true)]
    rhos: Vec<f64>,
    /// Episodes per grid cell.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated planner modes.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    modes: Vec<PlannerMode>,
    /// Base seed for the seed derivation.
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: csv or jsonl.
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct CheckArgs {
    /// Track file (TOML).
    #[arg(long)]
    track: PathBuf,
}

fn load_track(path: &PathBuf) -> Result<TrackFile, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_track_file(&text)
}

fn cmd_run(args: &RunArgs) -> Result<(), Error> {
    let track = load_track(&args.track)?;
    let cfg = track.to_episode_config();
    let record_log = args.log.is_some();
    let result = run_episode(&cfg, args.mode, args.speed, args.rho, args.seed, record_log)?;
    if let Some(path) = &args.log {
        let mut file = fs::File::create(path)
            .map_err(|e| Error::invalid(format!("cannot create {}: {e}", path.display())))?;
        for record in &result.trajectory {
            let line = serde_json::to_string(record)
                .map_err(|e| Error::invalid(format!("log serialization: {e}")))?;
            writeln!(file, "{line}")
                .map_err(|e| Error::invalid(format!("log write: {e}")))?;
        }
    }
    println!(
        "track={} mode={} speed={:.2} rho={:.2} seed={} outcome={} gates_passed={} laps={} success={:.4} elapsed={:.3}s",
        track.name,
        args.mode,
        args.speed,
        args.rho,
        args.seed,
        result.outcome,
        result.gates_passed,
        result.laps_completed,
        result.success_fraction,
        result.elapsed,
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Error> {
    let track = load_track(&args.track)?;
    let format = match args.format.as_str() {
        "csv" => TableFormat::Csv,
        "jsonl" => TableFormat::JsonLines,
        other => {
            return Err(Error::config("format", format!("unknown format `{other}`")));
        }
    };
    let spec = SweepSpec {
        speeds: args.speeds.clone(),
        rhos: args.rhos.clone(),
        seeds_per_cell: args.seeds,
        modes: args.modes.clone(),
    };
    let table = run_sweep(&spec, &track, args.base_seed)?;
    let text = emit_results(&table, format);
    match &args.out {
        Some(path) => fs::write(path, text)
            .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> Result<(), Error> {
    let track = load_track(&args.track)?;
    println!(
        "ok: track `{}` with {} gates, control {} Hz, perception {} Hz, {} required laps",
        track.name,
        track.gates.len(),
        track.sim.control_rate_hz,
        track.sim.perception_rate_hz,
        track.sim.required_laps,
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Check(args) => cmd_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Parse(_) | Error::Config { .. } => ExitCode::from(2),
                Error::Invalid(_) => ExitCode::from(3),
            }
        }
    }
}
