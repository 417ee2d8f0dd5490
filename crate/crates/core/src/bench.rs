//! Experiment configuration and the benchmark harness: track files, sweep
//! specifications over (mode, speed, perturbation), and plot-ready result
//! tables in CSV or JSON-lines form.
//!
//! A track file is TOML: a gate list plus optional `camera`, `noise`,
//! `mapping`, `sim`, `controller`, and `planner` tables, all falling back to
//! defaults. Unknown keys are rejected. The file is the product of the
//! demonstration flight: coarse gate poses the map is seeded with.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::MpcConfig;
use crate::error::Error;
use crate::geometry::{GatePose, Vec3};
use crate::mapping::MappingConfig;
use crate::perception::{CameraModel, NoiseModel};
use crate::planning::PlannerConfig;
use crate::sim::{
    run_episode, EpisodeConfig, GateSpec, Outcome, PlannerMode, RunResult, SimConfig,
};

/// Environment variable overriding the sweep thread count.
pub const THREADS_ENV_VAR: &str = "GATENAV_THREADS";

/// One gate entry of a track file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateEntry {
    /// Gate center `[x, y, z]` in meters.
    pub position: [f64; 3],
    /// Gate yaw about the world z-axis, radians.
    pub yaw: f64,
    /// Aperture half-extents `[half_width, half_height]`, meters.
    #[serde(default = "default_aperture")]
    pub aperture: [f64; 2],
}

fn default_aperture() -> [f64; 2] {
    [0.75, 0.75]
}

/// Parsed and validated experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackFile {
    pub name: String,
    pub gates: Vec<GateEntry>,
    #[serde(default)]
    pub camera: CameraModel,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub mapping: MappingConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub controller: MpcConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
}

/// Parses and fully validates a track file. Syntax errors carry the toml
/// line/column; semantic errors name the violated field.
pub fn parse_track_file(text: &str) -> Result<TrackFile, Error> {
    let track: TrackFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    track.validate()?;
    Ok(track)
}

impl TrackFile {
    pub fn validate(&self) -> Result<(), Error> {
        if self.name.is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        if self.gates.len() < 2 {
            return Err(Error::config("gates", "track needs at least 2 gates"));
        }
        for (i, gate) in self.gates.iter().enumerate() {
            if !gate.position.iter().all(|v| v.is_finite()) || !gate.yaw.is_finite() {
                return Err(Error::config(
                    format!("gates[{i}].position"),
                    "must be finite",
                ));
            }
            if gate.aperture.iter().any(|&a| a <= 0.0) {
                return Err(Error::config(
                    format!("gates[{i}].aperture"),
                    "half-extents must be positive",
                ));
            }
        }
        self.camera.validate()?;
        self.noise.validate()?;
        self.mapping.validate()?;
        self.sim.validate()?;
        self.controller.validate()?;
        self.planner.validate()?;
        for entry in &self.sim.gate_move_schedule {
            if entry.gate >= self.gates.len() {
                return Err(Error::config(
                    "sim.gate_move_schedule",
                    format!("gate index {} out of range", entry.gate),
                ));
            }
        }
        Ok(())
    }

    pub fn to_episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            gates: self
                .gates
                .iter()
                .map(|g| GateSpec {
                    pose: GatePose::new(Vec3::from_row_slice(&g.position), g.yaw),
                    aperture: (g.aperture[0], g.aperture[1]),
                })
                .collect(),
            camera: self.camera,
            noise: self.noise,
            mapping: self.mapping,
            sim: self.sim.clone(),
            controller: self.controller,
            planner: self.planner,
        }
    }
}

/// Grid of sweep cells: every (mode, speed, rho) combination runs
/// `seeds_per_cell` episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub speeds: Vec<f64>,
    pub rhos: Vec<f64>,
    pub seeds_per_cell: u64,
    pub modes: Vec<PlannerMode>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.speeds.is_empty() || self.rhos.is_empty() || self.modes.is_empty() {
            return Err(Error::config("sweep", "speeds, rhos, and modes must be nonempty"));
        }
        if self.seeds_per_cell < 1 {
            return Err(Error::config("sweep.seeds", "needs at least 1 seed per cell"));
        }
        if self.speeds.iter().any(|&v| v < 0.0) || self.rhos.iter().any(|&r| r < 0.0) {
            return Err(Error::config("sweep", "speeds and rhos must be nonnegative"));
        }
        Ok(())
    }
}

fn round_to(v: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (v * scale).round() / scale
}

/// One episode's row of the result table. Numeric fields are stored at the
/// emission precision, so emit/parse round-trips exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: PlannerMode,
    pub speed_mps: f64,
    pub rho_m: f64,
    pub seed: u64,
    pub outcome: Outcome,
    pub gates_passed: usize,
    pub laps: usize,
    pub success_fraction: f64,
    pub elapsed_s: f64,
}

impl ResultRow {
    pub fn new(mode: PlannerMode, speed: f64, rho: f64, seed: u64, result: &RunResult) -> Self {
        Self {
            mode,
            speed_mps: round_to(speed, 2),
            rho_m: round_to(rho, 2),
            seed,
            outcome: result.outcome,
            gates_passed: result.gates_passed,
            laps: result.laps_completed,
            success_fraction: round_to(result.success_fraction, 4),
            elapsed_s: round_to(result.elapsed, 3),
        }
    }
}

/// Plot-ready sweep results, ordered by (cell, replicate).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// Mean success fraction of one cell, or `None` if the cell is absent.
    pub fn mean_success(&self, mode: PlannerMode, speed: f64, rho: f64) -> Option<f64> {
        let rows: Vec<&ResultRow> = self
            .rows
            .iter()
            .filter(|r| {
                r.mode == mode
                    && (r.speed_mps - speed).abs() < 1e-9
                    && (r.rho_m - rho).abs() < 1e-9
            })
            .collect();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().map(|r| r.success_fraction).sum::<f64>() / rows.len() as f64)
    }
}

/// Runs the sweep grid. Cells execute in parallel; each episode's seed is
/// `base_seed + cell_index + replicate`, so the table is a pure function of
/// the spec and base seed regardless of scheduling.
pub fn run_sweep(
    spec: &SweepSpec,
    track: &TrackFile,
    base_seed: u64,
) -> Result<ResultTable, Error> {
    spec.validate()?;
    track.validate()?;
    let cfg = track.to_episode_config();

    let mut jobs = Vec::new();
    let mut cell_index: u64 = 0;
    for &mode in &spec.modes {
        for &speed in &spec.speeds {
            for &rho in &spec.rhos {
                for replicate in 0..spec.seeds_per_cell {
                    let seed = base_seed
                        .wrapping_add(cell_index)
                        .wrapping_add(replicate);
                    jobs.push((cell_index, replicate, mode, speed, rho, seed));
                }
                cell_index += 1;
            }
        }
    }

    let run_all = || -> Result<Vec<(u64, u64, ResultRow)>, Error> {
        jobs.par_iter()
            .map(|&(cell, rep, mode, speed, rho, seed)| {
                let result = run_episode(&cfg, mode, speed, rho, seed, false)?;
                Ok((cell, rep, ResultRow::new(mode, speed, rho, seed, &result)))
            })
            .collect()
    };

    let mut keyed = match sweep_thread_count() {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            pool.install(run_all)?
        }
        None => run_all()?,
    };
    keyed.sort_by_key(|&(cell, rep, _)| (cell, rep));
    Ok(ResultTable {
        rows: keyed.into_iter().map(|(_, _, row)| row).collect(),
    })
}

fn sweep_thread_count() -> Option<usize> {
    std::env::var(THREADS_ENV_VAR)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Output encoding for result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    JsonLines,
}

pub const CSV_HEADER: &str =
    "mode,speed_mps,rho_m,seed,outcome,gates_passed,laps,success_fraction,elapsed_s";

/// Serializes the table. CSV columns and precisions are fixed: speed and rho
/// with 2 decimals, success with 4, elapsed with 3.
pub fn emit_results(table: &ResultTable, format: TableFormat) -> String {
    match format {
        TableFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for r in &table.rows {
                out.push_str(&format!(
                    "{},{:.2},{:.2},{},{},{},{},{:.4},{:.3}\n",
                    r.mode,
                    r.speed_mps,
                    r.rho_m,
                    r.seed,
                    r.outcome,
                    r.gates_passed,
                    r.laps,
                    r.success_fraction,
                    r.elapsed_s
                ));
            }
            out
        }
        TableFormat::JsonLines => {
            let mut out = String::new();
            for r in &table.rows {
                out.push_str(&serde_json::to_string(r).expect("row serializes"));
                out.push('\n');
            }
            out
        }
    }
}

/// Parses a CSV table emitted by [`emit_results`].
pub fn parse_results(text: &str) -> Result<ResultTable, Error> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty results file".into()))?;
    if header != CSV_HEADER {
        return Err(Error::Parse(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Parse(format!(
                "line {}: expected 9 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64, Error> {
            s.parse::<f64>()
                .map_err(|_| Error::Parse(format!("line {}: bad {what} `{s}`", lineno + 2)))
        };
        rows.push(ResultRow {
            mode: fields[0].parse()?,
            speed_mps: parse_f64(fields[1], "speed")?,
            rho_m: parse_f64(fields[2], "rho")?,
            seed: fields[3]
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad seed", lineno + 2)))?,
            outcome: fields[4].parse()?,
            gates_passed: fields[5]
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad gates_passed", lineno + 2)))?,
            laps: fields[6]
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad laps", lineno + 2)))?,
            success_fraction: parse_f64(fields[7], "success_fraction")?,
            elapsed_s: parse_f64(fields[8], "elapsed_s")?,
        });
    }
    Ok(ResultTable { rows })
}
