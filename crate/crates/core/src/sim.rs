//! Ground-truth world: perturbed gate poses, vehicle dynamics, odometry
//! drift between the world and odometry frames, perception/control rate
//! scheduling, and episode scoring against the three-lap success metric.
//!
//! Information structure: the perception oracle sees true world poses; the
//! mapping, planning, and control stack only ever sees odometry-frame
//! quantities. Scoring uses truth-frame plane crossings exclusively, never
//! the belief-frame traversals that drive the gate pointer.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{
    build_path_references, propagate_dynamics, solve_receding_horizon, track_step, ControlInput,
    MpcConfig, QuadState, ReferencePoint,
};
use crate::error::Error;
use crate::geometry::{wrap_angle, yaw_rotation, GatePose, Vec3};
use crate::mapping::{map_step, BodyPoseEstimate, MappingConfig, MeasurementOutcome, TrackMap, Traversal};
use crate::perception::{CameraModel, MeasurementSource, NoiseModel, PerceptionOracle};
use crate::planning::{
    baseline_los_reference, generate_waypoints, Planner, PlannerConfig, ReferencePath,
};

/// How far before the first gate the vehicle starts, along the gate normal.
const START_DISTANCE: f64 = 4.0;

/// Random-walk drift intensities, standard deviation per square-root second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftRate {
    pub translation: f64,
    pub yaw: f64,
}

impl Default for DriftRate {
    fn default() -> Self {
        Self { translation: 0.0, yaw: 0.0 }
    }
}

/// A scheduled true-gate displacement (the beliefs are not told).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateMove {
    pub time: f64,
    pub gate: usize,
    pub position: [f64; 3],
    pub yaw: f64,
}

/// Simulation schedule and episode-termination settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub control_rate_hz: f64,
    pub perception_rate_hz: f64,
    pub drift_rate: DriftRate,
    pub perturbation_radius: f64,
    pub gate_move_schedule: Vec<GateMove>,
    pub timeout: f64,
    pub required_laps: usize,
    /// Width of the solid frame around the aperture; crossings inside it
    /// count as crashes.
    pub frame_band: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_rate_hz: 100.0,
            perception_rate_hz: 10.0,
            drift_rate: DriftRate::default(),
            perturbation_radius: 0.0,
            gate_move_schedule: Vec::new(),
            timeout: 120.0,
            required_laps: 3,
            frame_band: 0.3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.control_rate_hz <= 0.0 || self.perception_rate_hz <= 0.0 {
            return Err(Error::config("sim.control_rate_hz", "rates must be positive"));
        }
        let ratio = self.control_rate_hz / self.perception_rate_hz;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::config(
                "sim.perception_rate_hz",
                "control rate must be an integer multiple of the perception rate",
            ));
        }
        if self.timeout <= 0.0 {
            return Err(Error::config("sim.timeout", "must be positive"));
        }
        if self.required_laps < 1 {
            return Err(Error::config("sim.required_laps", "must be at least 1"));
        }
        if self.perturbation_radius < 0.0 {
            return Err(Error::config("sim.perturbation_radius", "must be nonnegative"));
        }
        if self.drift_rate.translation < 0.0 || self.drift_rate.yaw < 0.0 {
            return Err(Error::config("sim.drift_rate", "must be nonnegative"));
        }
        if self.frame_band < 0.0 {
            return Err(Error::config("sim.frame_band", "must be nonnegative"));
        }
        Ok(())
    }

    /// Control ticks per perception tick.
    pub fn perception_period(&self) -> usize {
        (self.control_rate_hz / self.perception_rate_hz).round() as usize
    }
}

/// One gate of the nominal track: demonstrated pose plus aperture
/// half-extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSpec {
    pub pose: GatePose,
    pub aperture: (f64, f64),
}

/// Everything an episode needs, independent of how it was parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub gates: Vec<GateSpec>,
    pub camera: CameraModel,
    pub noise: NoiseModel,
    pub mapping: MappingConfig,
    pub sim: SimConfig,
    pub controller: MpcConfig,
    pub planner: PlannerConfig,
}

impl EpisodeConfig {
    pub fn nominal_poses(&self) -> Vec<GatePose> {
        self.gates.iter().map(|g| g.pose).collect()
    }
}

/// Transform between the true world frame and the drifting odometry frame:
/// the odometry frame's pose expressed in the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub t_wo: [f64; 3],
    pub yaw_wo: f64,
}

impl Drift {
    pub fn identity() -> Self {
        Self { t_wo: [0.0; 3], yaw_wo: 0.0 }
    }

    fn translation(&self) -> Vec3 {
        Vec3::from_row_slice(&self.t_wo)
    }

    /// Maps a true world position to what the odometry reports.
    pub fn world_to_odometry_pos(&self, p_w: &Vec3) -> Vec3 {
        yaw_rotation(-self.yaw_wo) * (p_w - self.translation())
    }

    pub fn world_to_odometry_yaw(&self, yaw_w: f64) -> f64 {
        wrap_angle(yaw_w - self.yaw_wo)
    }

    /// Maps a free vector (velocity, acceleration) from world to odometry.
    pub fn world_to_odometry_vec(&self, v_w: &Vec3) -> Vec3 {
        yaw_rotation(-self.yaw_wo) * v_w
    }

    pub fn odometry_to_world_vec(&self, v_o: &Vec3) -> Vec3 {
        yaw_rotation(self.yaw_wo) * v_o
    }

    /// A true gate pose as it would appear in the odometry frame.
    pub fn gate_to_odometry(&self, gate: &GatePose) -> GatePose {
        GatePose::new(
            self.world_to_odometry_pos(&gate.t),
            self.world_to_odometry_yaw(gate.yaw),
        )
    }
}

/// One random-walk increment of the drift transform.
pub fn drift_step(drift: &Drift, dt: f64, rate: &DriftRate, rng: &mut dyn RngCore) -> Drift {
    assert!(dt > 0.0, "drift step needs positive dt");
    let sd_t = rate.translation * dt.sqrt();
    let sd_y = rate.yaw * dt.sqrt();
    let normal_t = Normal::new(0.0, sd_t).expect("valid drift sigma");
    let normal_y = Normal::new(0.0, sd_y).expect("valid drift sigma");
    let mut t = drift.t_wo;
    for c in &mut t {
        *c += normal_t.sample(rng);
    }
    Drift {
        t_wo: t,
        yaw_wo: wrap_angle(drift.yaw_wo + normal_y.sample(rng)),
    }
}

/// Randomly displaces each gate inside a horizontal disk of radius `rho`
/// (z unchanged) and perturbs its yaw uniformly within `+-0.15 * rho` rad.
/// The same rng draws are consumed for every `rho`, so runs with the same
/// seed are paired across perturbation magnitudes.
pub fn perturb_track(nominal: &[GatePose], rho: f64, rng: &mut dyn RngCore) -> Vec<GatePose> {
    assert!(rho >= 0.0, "perturbation radius must be nonnegative");
    nominal
        .iter()
        .map(|gate| {
            let radius = rho * rng.gen::<f64>().sqrt();
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let yaw_unit = rng.gen_range(-1.0..1.0);
            GatePose::new(
                gate.t + Vec3::new(radius * angle.cos(), radius * angle.sin(), 0.0),
                gate.yaw + 0.15 * rho * yaw_unit,
            )
        })
        .collect()
}

/// Truth-frame classification of one motion segment against one gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TruthCrossing {
    None,
    Passed,
    Missed,
    Crashed,
}

/// Plane-crossing test against the TRUE gate pose. A crossing inside the
/// aperture passes; inside the surrounding frame band it crashes; farther
/// out it misses. Ground contact (z <= 0) anywhere is a crash.
pub fn classify_crossing_truth(
    prev: &Vec3,
    curr: &Vec3,
    gate: &GatePose,
    aperture: (f64, f64),
    frame_band: f64,
) -> TruthCrossing {
    if curr.z <= 0.0 {
        return TruthCrossing::Crashed;
    }
    let p = crate::geometry::gate_frame_coords(prev, gate);
    let c = crate::geometry::gate_frame_coords(curr, gate);
    if !(p.x < 0.0 && c.x >= 0.0) {
        return TruthCrossing::None;
    }
    let lambda = -p.x / (c.x - p.x);
    let y = (p.y + lambda * (c.y - p.y)).abs();
    let z = (p.z + lambda * (c.z - p.z)).abs();
    if y <= aperture.0 && z <= aperture.1 {
        TruthCrossing::Passed
    } else if y <= aperture.0 + frame_band && z <= aperture.1 + frame_band {
        TruthCrossing::Crashed
    } else {
        TruthCrossing::Missed
    }
}

/// Mutable ground truth during an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub state: QuadState,
    pub drift: Drift,
    pub gates: Vec<GatePose>,
    pub time: f64,
    pub gates_passed: usize,
    pub laps_completed: usize,
    /// Index of the gate the scorer is watching.
    pub score_gate: usize,
}

/// Applies a scheduled gate move to the true world. Beliefs are untouched;
/// the filter has to discover the change.
pub fn move_gate(world: &mut WorldState, entry: &GateMove) -> Result<(), Error> {
    let pose = world
        .gates
        .get_mut(entry.gate)
        .ok_or_else(|| Error::invalid(format!("gate move index {} out of range", entry.gate)))?;
    *pose = GatePose::new(Vec3::from_row_slice(&entry.position), entry.yaw);
    Ok(())
}

/// Which planner drives the vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerMode {
    /// Filtered map, waypoints, carrot tracking.
    Full,
    /// Reactive line-of-sight guidance toward the latest measured gate.
    Baseline,
}

impl std::str::FromStr for PlannerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "full" => Ok(PlannerMode::Full),
            "baseline" => Ok(PlannerMode::Baseline),
            other => Err(Error::invalid(format!("unknown planner mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PlannerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlannerMode::Full => write!(f, "full"),
            PlannerMode::Baseline => write!(f, "baseline"),
        }
    }
}

/// Episode outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Completed,
    Crashed,
    Missed,
    Timeout,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Outcome::Completed => "completed",
            Outcome::Crashed => "crashed",
            Outcome::Missed => "missed",
            Outcome::Timeout => "timeout",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "completed" => Ok(Outcome::Completed),
            "crashed" => Ok(Outcome::Crashed),
            "missed" => Ok(Outcome::Missed),
            "timeout" => Ok(Outcome::Timeout),
            other => Err(Error::invalid(format!("unknown outcome `{other}`"))),
        }
    }
}

/// Noteworthy events inside one control tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SimEvent {
    GatePassed { gate: usize },
    GateMissed { gate: usize },
    Crashed,
    BeliefGatePassed { gate: usize },
    BeliefGateMissed { gate: usize },
    MeasurementOutlier { nearest: usize },
    MeasurementIllConditioned { gate: usize },
    GateMoved { gate: usize },
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub true_p: [f64; 3],
    pub true_v: [f64; 3],
    pub true_yaw: f64,
    pub vio_p: [f64; 3],
    pub vio_yaw: f64,
    pub belief_means: Vec<[f64; 4]>,
    /// Commanded input: acceleration (odometry frame) and yaw rate.
    pub input: [f64; 4],
    pub measurement: Option<[f64; 4]>,
    pub events: Vec<SimEvent>,
}

/// Episode outcome and scoring.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub outcome: Outcome,
    pub gates_passed: usize,
    pub laps_completed: usize,
    pub success_fraction: f64,
    pub elapsed: f64,
    /// One record per control tick when logging was requested, else empty.
    pub trajectory: Vec<TickRecord>,
}

/// Fraction of the gates required for a full run: `gates_passed` over
/// `required_laps * gates_per_lap`, capped at 1. One lap of a three-lap run
/// scores one third.
pub fn success_fraction(gates_passed: usize, required_laps: usize, gates_per_lap: usize) -> f64 {
    let denom = (required_laps * gates_per_lap) as f64;
    (gates_passed as f64 / denom).min(1.0)
}

/// Per-purpose deterministic rng streams derived from one episode seed.
fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_PERTURB: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_DRIFT: u64 = 2;

/// Start pose: hovering `START_DISTANCE` before the first nominal gate,
/// facing along its normal.
pub fn start_state(nominal: &[GatePose]) -> QuadState {
    let g = &nominal[0];
    let p = g.t - g.rotation() * Vec3::new(START_DISTANCE, 0.0, 0.0);
    QuadState::at_rest(p, g.yaw)
}

/// Runs one closed-loop episode at a fixed control rate. Deterministic for
/// a given `(config, mode, speed, rho, seed)`.
pub fn run_episode(
    cfg: &EpisodeConfig,
    mode: PlannerMode,
    speed: f64,
    rho: f64,
    seed: u64,
    record_log: bool,
) -> Result<RunResult, Error> {
    cfg.sim.validate()?;
    cfg.controller.validate()?;
    cfg.planner.validate()?;
    cfg.camera.validate()?;
    cfg.noise.validate()?;
    if cfg.gates.len() < 2 {
        return Err(Error::config("gates", "need at least 2 gates"));
    }
    if speed < 0.0 {
        return Err(Error::invalid("commanded speed must be nonnegative"));
    }

    let nominal = cfg.nominal_poses();
    let n_gates = nominal.len();
    let dt = 1.0 / cfg.sim.control_rate_hz;
    let period = cfg.sim.perception_period();
    let max_ticks = (cfg.sim.timeout * cfg.sim.control_rate_hz).ceil() as usize;

    let mut rng_perturb = episode_rng(seed, STREAM_PERTURB);
    let mut rng_noise = episode_rng(seed, STREAM_NOISE);
    let mut rng_drift = episode_rng(seed, STREAM_DRIFT);

    let mut world = WorldState {
        state: start_state(&nominal),
        drift: Drift::identity(),
        gates: perturb_track(&nominal, rho, &mut rng_perturb),
        time: 0.0,
        gates_passed: 0,
        laps_completed: 0,
        score_gate: 0,
    };
    let mut map = TrackMap::from_nominal(
        &nominal,
        &cfg.mapping.process_sigma,
        &cfg.mapping.prior_sigma,
    );
    let oracle = PerceptionOracle { camera: cfg.camera, noise: cfg.noise };
    let mut planner = Planner::default();
    let mut baseline_carrot: Option<(Vec3, f64)> = None;
    let mut moves_applied = vec![false; cfg.sim.gate_move_schedule.len()];
    let mut prev_true_p = world.state.p;
    let mut trajectory = Vec::new();

    let mut outcome = Outcome::Timeout;
    for tick in 0..max_ticks {
        world.time = tick as f64 * dt;
        let mut events = Vec::new();

        for (applied, entry) in moves_applied.iter_mut().zip(&cfg.sim.gate_move_schedule) {
            if !*applied && entry.time <= world.time {
                move_gate(&mut world, entry)?;
                *applied = true;
                events.push(SimEvent::GateMoved { gate: entry.gate });
            }
        }

        // Odometry view of the current true state.
        let vio_p = world.drift.world_to_odometry_pos(&world.state.p);
        let vio_yaw = world.drift.world_to_odometry_yaw(world.state.yaw);
        let vio_v = world.drift.world_to_odometry_vec(&world.state.v);
        let vio_state = QuadState { p: vio_p, v: vio_v, yaw: vio_yaw };
        let body = BodyPoseEstimate::from_yaw(vio_p, vio_yaw);

        let measurement = if tick % period == 0 {
            oracle.sample(
                &world.state.p,
                world.state.yaw,
                &world.gates,
                world.time,
                &mut rng_noise,
            )
        } else {
            None
        };

        let input = match mode {
            PlannerMode::Full => {
                let prev_vio_p = world.drift.world_to_odometry_pos(&prev_true_p);
                let aperture = cfg.gates[map.next_gate].aperture;
                let step =
                    map_step(&mut map, measurement.as_ref(), &body, &prev_vio_p, &vio_p, aperture);
                match step.measurement {
                    MeasurementOutcome::Outlier { nearest } => {
                        events.push(SimEvent::MeasurementOutlier { nearest });
                    }
                    MeasurementOutcome::IllConditioned { gate, .. } => {
                        events.push(SimEvent::MeasurementIllConditioned { gate });
                    }
                    _ => {}
                }
                match step.traversal {
                    Traversal::Passed { gate, .. } => {
                        events.push(SimEvent::BeliefGatePassed { gate });
                    }
                    Traversal::Missed { gate } => {
                        events.push(SimEvent::BeliefGateMissed { gate });
                    }
                    Traversal::None => {}
                }

                let (path, progress) =
                    planner.plan(&map, cfg.planner.gate_offset, &vio_p)?;
                let (u, _) =
                    track_step(&vio_state, &path, progress, speed, &cfg.controller)?;
                u
            }
            PlannerMode::Baseline => {
                if measurement.is_some() {
                    baseline_carrot = baseline_los_reference(measurement.as_ref(), &body);
                }
                baseline_input(&vio_state, baseline_carrot, speed, cfg)?
            }
        };

        // The controller commands in the odometry frame; the true vehicle
        // executes in the world frame.
        let world_input = ControlInput {
            accel: world.drift.odometry_to_world_vec(&input.accel),
            yaw_rate: input.yaw_rate,
        };
        let prev_state = world.state;
        world.state = propagate_dynamics(&world.state, &world_input, dt);
        prev_true_p = prev_state.p;

        // Truth-frame scoring against the gate the scorer is watching.
        let spec = &cfg.gates[world.score_gate];
        let truth_gate = world.gates[world.score_gate];
        let crossing = classify_crossing_truth(
            &prev_state.p,
            &world.state.p,
            &truth_gate,
            spec.aperture,
            cfg.sim.frame_band,
        );
        let mut done = false;
        match crossing {
            TruthCrossing::None => {}
            TruthCrossing::Passed => {
                events.push(SimEvent::GatePassed { gate: world.score_gate });
                world.gates_passed += 1;
                world.score_gate = (world.score_gate + 1) % n_gates;
                if world.score_gate == 0 {
                    world.laps_completed += 1;
                    if world.laps_completed >= cfg.sim.required_laps {
                        outcome = Outcome::Completed;
                        done = true;
                    }
                }
            }
            TruthCrossing::Missed => {
                events.push(SimEvent::GateMissed { gate: world.score_gate });
                outcome = Outcome::Missed;
                done = true;
            }
            TruthCrossing::Crashed => {
                events.push(SimEvent::Crashed);
                outcome = Outcome::Crashed;
                done = true;
            }
        }

        if record_log {
            trajectory.push(TickRecord {
                t: world.time,
                true_p: prev_state.p.into(),
                true_v: prev_state.v.into(),
                true_yaw: prev_state.yaw,
                vio_p: vio_p.into(),
                vio_yaw,
                belief_means: map.beliefs.iter().map(|b| b.mean.into()).collect(),
                input: [input.accel.x, input.accel.y, input.accel.z, input.yaw_rate],
                measurement: measurement.as_ref().map(|m| m.mean),
                events,
            });
        }

        world.time = (tick + 1) as f64 * dt;
        if done {
            break;
        }
        world.drift = drift_step(&world.drift, dt, &cfg.sim.drift_rate, &mut rng_drift);
    }

    Ok(RunResult {
        outcome,
        gates_passed: world.gates_passed,
        laps_completed: world.laps_completed,
        success_fraction: success_fraction(
            world.gates_passed,
            cfg.sim.required_laps,
            n_gates,
        ),
        elapsed: world.time,
        trajectory,
    })
}

/// Baseline control: march straight toward the held carrot at the commanded
/// speed; with no carrot yet, hover in place.
fn baseline_input(
    vio_state: &QuadState,
    carrot: Option<(Vec3, f64)>,
    speed: f64,
    cfg: &EpisodeConfig,
) -> Result<ControlInput, Error> {
    let refs: Vec<ReferencePoint> = match carrot {
        None => (0..cfg.controller.horizon_steps)
            .map(|_| ReferencePoint {
                p: vio_state.p,
                v: Vec3::zeros(),
                yaw: vio_state.yaw,
            })
            .collect(),
        Some((point, yaw)) => {
            if (point - vio_state.p).norm() < 0.05 {
                (0..cfg.controller.horizon_steps)
                    .map(|_| ReferencePoint { p: point, v: Vec3::zeros(), yaw })
                    .collect()
            } else {
                let path = ReferencePath::new([vio_state.p, point])?;
                build_path_references(&path, 0.0, speed, &cfg.controller)
            }
        }
    };
    let (u, _) = solve_receding_horizon(vio_state, &refs, &cfg.controller)?;
    Ok(u)
}

/// Result of the open-loop mapping probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    /// Position error of the last gate's belief against the drift-mapped
    /// truth at the end of the lap, meters.
    pub final_gate_error: f64,
    /// Same error averaged over all gates.
    pub mean_gate_error: f64,
}

/// Plays the vehicle back along the nominal waypoint lap at a fixed speed
/// (no controller in the loop) while drift accumulates, and measures how
/// well the filtered map tracks the drift-mapped truth. Decouples the
/// drift-compensation question from control performance.
pub fn run_mapping_probe(
    cfg: &EpisodeConfig,
    speed: f64,
    seed: u64,
    perception_on: bool,
) -> Result<ProbeResult, Error> {
    cfg.sim.validate()?;
    cfg.camera.validate()?;
    cfg.noise.validate()?;
    let nominal = cfg.nominal_poses();
    let n_gates = nominal.len();
    let dt = 1.0 / cfg.sim.control_rate_hz;
    let period = cfg.sim.perception_period();

    let mut rng_noise = episode_rng(seed, STREAM_NOISE);
    let mut rng_drift = episode_rng(seed, STREAM_DRIFT);

    // Playback path: start point, then front/back waypoints of each gate in
    // lap order. Ends right after the last gate.
    let start = start_state(&nominal);
    let mut map = TrackMap::from_nominal(
        &nominal,
        &cfg.mapping.process_sigma,
        &cfg.mapping.prior_sigma,
    );
    let waypoints = generate_waypoints(&map, cfg.planner.gate_offset, &start.p)?;
    let points: Vec<Vec3> = std::iter::once(start.p)
        .chain(waypoints.iter().map(|w| w.p))
        .collect();
    let path = ReferencePath::new(points)?;
    let total_ticks = (path.total_length() / speed / dt).floor() as usize;

    let mut drift = Drift::identity();
    let mut prev_p = start.p;
    for tick in 0..=total_ticks {
        let t = tick as f64 * dt;
        let s = (speed * t).min(path.total_length());
        let p = path.point_at(s);
        let yaw = path.heading_at(s);

        let vio_p = drift.world_to_odometry_pos(&p);
        let vio_yaw = drift.world_to_odometry_yaw(yaw);
        let prev_vio_p = drift.world_to_odometry_pos(&prev_p);
        let body = BodyPoseEstimate::from_yaw(vio_p, vio_yaw);

        let measurement = if perception_on && tick % period == 0 {
            let oracle = PerceptionOracle { camera: cfg.camera, noise: cfg.noise };
            oracle.sample(&p, yaw, &nominal, t, &mut rng_noise)
        } else {
            None
        };

        let aperture = cfg.gates[map.next_gate].aperture;
        map_step(&mut map, measurement.as_ref(), &body, &prev_vio_p, &vio_p, aperture);

        prev_p = p;
        drift = drift_step(&drift, dt, &cfg.sim.drift_rate, &mut rng_drift);
    }

    let errors: Vec<f64> = (0..n_gates)
        .map(|i| {
            let truth_in_odom = drift.gate_to_odometry(&nominal[i]);
            (map.beliefs[i].position() - truth_in_odom.t).norm()
        })
        .collect();
    Ok(ProbeResult {
        final_gate_error: errors[n_gates - 1],
        mean_gate_error: errors.iter().sum::<f64>() / n_gates as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn oval_gates(n: usize, radius: f64) -> Vec<GateSpec> {
        // Circle of gates starting 4 m ahead of the origin, traversed
        // counterclockwise.
        let center = Vec3::new(START_DISTANCE, radius, 1.5);
        (0..n)
            .map(|k| {
                let beta = -std::f64::consts::FRAC_PI_2
                    + k as f64 * std::f64::consts::TAU / n as f64;
                GateSpec {
                    pose: GatePose::new(
                        center + radius * Vec3::new(beta.cos(), beta.sin(), 0.0),
                        beta + std::f64::consts::FRAC_PI_2,
                    ),
                    aperture: (0.75, 0.75),
                }
            })
            .collect()
    }

    pub(crate) fn test_config() -> EpisodeConfig {
        EpisodeConfig {
            gates: oval_gates(8, 10.0),
            camera: CameraModel::default(),
            noise: NoiseModel::default(),
            mapping: MappingConfig::default(),
            sim: SimConfig {
                timeout: 300.0,
                ..SimConfig::default()
            },
            controller: MpcConfig::default(),
            planner: PlannerConfig::default(),
        }
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let nominal = test_config().nominal_poses();
        let mut rng = episode_rng(1, STREAM_PERTURB);
        let perturbed = perturb_track(&nominal, 0.0, &mut rng);
        assert_eq!(perturbed, nominal);
    }

    #[test]
    fn perturbation_respects_bounds_and_determinism() {
        let nominal = test_config().nominal_poses();
        let a = perturb_track(&nominal, 2.0, &mut episode_rng(7, STREAM_PERTURB));
        let b = perturb_track(&nominal, 2.0, &mut episode_rng(7, STREAM_PERTURB));
        assert_eq!(a, b);
        for (g, p) in nominal.iter().zip(&a) {
            let d = p.t - g.t;
            assert!(d.norm() <= 2.0 + 1e-12);
            assert_abs_diff_eq!(d.z, 0.0);
            assert!(wrap_angle(p.yaw - g.yaw).abs() <= 0.3 + 1e-12);
        }
    }

    #[test]
    fn paired_perturbations_scale_with_rho() {
        let nominal = test_config().nominal_poses();
        let r1 = perturb_track(&nominal, 1.0, &mut episode_rng(3, STREAM_PERTURB));
        let r2 = perturb_track(&nominal, 2.0, &mut episode_rng(3, STREAM_PERTURB));
        for ((g, a), b) in nominal.iter().zip(&r1).zip(&r2) {
            let da = a.t - g.t;
            let db = b.t - g.t;
            assert_abs_diff_eq!(db.norm(), 2.0 * da.norm(), epsilon = 1e-12);
            if da.norm() > 1e-12 {
                assert_abs_diff_eq!(da.normalize(), db.normalize(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_drift_rate_is_constant() {
        let mut rng = episode_rng(2, STREAM_DRIFT);
        let mut d = Drift::identity();
        for _ in 0..100 {
            d = drift_step(&d, 0.01, &DriftRate::default(), &mut rng);
        }
        assert_eq!(d, Drift::identity());
        // VIO equals truth under zero drift.
        let p = Vec3::new(3.0, -2.0, 1.0);
        assert_abs_diff_eq!(d.world_to_odometry_pos(&p), p);
    }

    #[test]
    fn drift_variance_matches_random_walk() {
        let rate = DriftRate { translation: 0.05, yaw: 0.01 };
        let dt = 0.01;
        let steps = 100; // T = 1 s
        let runs = 10_000;
        let mut sum_sq = 0.0;
        let mut rng = episode_rng(11, STREAM_DRIFT);
        for _ in 0..runs {
            let mut d = Drift::identity();
            for _ in 0..steps {
                d = drift_step(&d, dt, &rate, &mut rng);
            }
            sum_sq += d.t_wo[0] * d.t_wo[0];
        }
        let var = sum_sq / runs as f64;
        let expected = rate.translation * rate.translation; // sigma^2 * T, T = 1
        assert!(
            (var - expected).abs() / expected < 0.05,
            "empirical {var} vs expected {expected}"
        );
    }

    #[test]
    fn truth_crossing_classification() {
        let gate = GatePose::new(Vec3::new(0.0, 0.0, 1.5), 0.0);
        let aperture = (0.75, 0.75);
        let prev = Vec3::new(-0.2, 0.0, 1.5);
        let curr = Vec3::new(0.1, 0.0, 1.5);
        assert_eq!(
            classify_crossing_truth(&prev, &curr, &gate, aperture, 0.3),
            TruthCrossing::Passed
        );
        let prev = Vec3::new(-0.2, 0.85, 1.5);
        let curr = Vec3::new(0.1, 0.85, 1.5);
        assert_eq!(
            classify_crossing_truth(&prev, &curr, &gate, aperture, 0.3),
            TruthCrossing::Crashed
        );
        let prev = Vec3::new(-0.2, 1.75, 1.5);
        let curr = Vec3::new(0.1, 1.75, 1.5);
        assert_eq!(
            classify_crossing_truth(&prev, &curr, &gate, aperture, 0.3),
            TruthCrossing::Missed
        );
        // Ground contact anywhere is a crash.
        assert_eq!(
            classify_crossing_truth(
                &Vec3::new(5.0, 5.0, 0.1),
                &Vec3::new(5.0, 5.0, -0.01),
                &gate,
                aperture,
                0.3
            ),
            TruthCrossing::Crashed
        );
    }

    #[test]
    fn move_gate_replaces_pose_and_checks_index() {
        let cfg = test_config();
        let mut world = WorldState {
            state: start_state(&cfg.nominal_poses()),
            drift: Drift::identity(),
            gates: cfg.nominal_poses(),
            time: 0.0,
            gates_passed: 0,
            laps_completed: 0,
            score_gate: 0,
        };
        let entry = GateMove { time: 1.0, gate: 2, position: [1.0, 2.0, 1.5], yaw: 0.3 };
        move_gate(&mut world, &entry).unwrap();
        assert_abs_diff_eq!(world.gates[2].t, Vec3::new(1.0, 2.0, 1.5));
        let bad = GateMove { time: 1.0, gate: 99, position: [0.0; 3], yaw: 0.0 };
        assert!(move_gate(&mut world, &bad).is_err());
    }

    #[test]
    fn episodes_are_deterministic() {
        let cfg = test_config();
        let a = run_episode(&cfg, PlannerMode::Full, 2.0, 1.0, 42, true).unwrap();
        let b = run_episode(&cfg, PlannerMode::Full, 2.0, 1.0, 42, true).unwrap();
        assert_eq!(a.outcome, b.outcome);
        assert_eq!(a.gates_passed, b.gates_passed);
        assert_eq!(a.trajectory, b.trajectory);
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn nominal_episode_completes_three_laps() {
        let cfg = test_config();
        let result = run_episode(&cfg, PlannerMode::Full, 2.0, 0.0, 7, false).unwrap();
        assert_eq!(result.outcome, Outcome::Completed, "{result:?}");
        assert_eq!(result.laps_completed, 3);
        assert_abs_diff_eq!(result.success_fraction, 1.0);
    }

    #[test]
    fn measurements_only_on_perception_ticks() {
        let cfg = test_config();
        let result = run_episode(&cfg, PlannerMode::Full, 1.5, 0.0, 3, true).unwrap();
        let period = cfg.sim.perception_period();
        let mut carried = 0;
        for (i, rec) in result.trajectory.iter().enumerate() {
            if rec.measurement.is_some() {
                assert_eq!(i % period, 0, "measurement off the perception grid");
                carried += 1;
            }
        }
        assert!(carried > 0);
        // Scoring consistency: gates_passed equals the truth-frame events.
        let truth_events: usize = result
            .trajectory
            .iter()
            .flat_map(|r| &r.events)
            .filter(|e| matches!(e, SimEvent::GatePassed { .. }))
            .count();
        assert_eq!(truth_events, result.gates_passed);
    }

    #[test]
    fn one_lap_counts_as_a_third() {
        assert_abs_diff_eq!(success_fraction(8, 3, 8), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(success_fraction(24, 3, 8), 1.0);
        assert_abs_diff_eq!(success_fraction(0, 3, 8), 0.0);
        // Capped even if extra gates were somehow counted.
        assert_abs_diff_eq!(success_fraction(25, 3, 8), 1.0);
    }

    #[test]
    fn moved_gate_without_perception_fails() {
        // Same scheduled move as the moving-gate robustness criterion, but
        // with the camera range band closed so no measurement ever arrives:
        // the vehicle flies through the stale gate position and hits the
        // displaced frame or misses.
        let mut cfg = test_config();
        cfg.sim.required_laps = 1;
        cfg.camera.min_range = 0.3;
        cfg.camera.max_range = 0.31;
        let pose = cfg.gates[1].pose;
        let moved = pose.t + pose.rotation() * Vec3::new(0.0, 1.0, 0.0);
        cfg.sim.gate_move_schedule = vec![GateMove {
            time: 8.0,
            gate: 1,
            position: [moved.x, moved.y, moved.z],
            yaw: pose.yaw,
        }];
        let result = run_episode(&cfg, PlannerMode::Full, 1.0, 0.0, 2, false).unwrap();
        assert!(
            matches!(result.outcome, Outcome::Crashed | Outcome::Missed),
            "{result:?}"
        );
    }

    #[test]
    fn probe_compensates_drift_only_with_perception() {
        let mut cfg = test_config();
        cfg.sim.drift_rate = DriftRate { translation: 0.05, yaw: 0.01 };
        let on = run_mapping_probe(&cfg, 1.0, 5, true).unwrap();
        let off = run_mapping_probe(&cfg, 1.0, 5, false).unwrap();
        assert!(
            on.final_gate_error < off.final_gate_error,
            "on {on:?} vs off {off:?}"
        );
        assert!(on.final_gate_error < 0.3, "{on:?}");
    }
}
