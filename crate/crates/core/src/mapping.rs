//! Per-gate extended Kalman filter map: measurement assignment with outlier
//! rejection, identity-dynamics prediction, a Joseph-form update, and
//! traversal tracking of the next gate to be passed.
//!
//! Each gate carries an independent 4-state filter over `[t_OG, phi_OG]` in
//! the odometry frame. Because the measurement lives in the body frame while
//! the state lives in the odometry frame, the measurement matrix is
//! `H = blockdiag(R_OB^-1, 1)` and the measurement noise has the nonzero
//! mean `mu = [-R_OB^-1 t_OB, -phi_OB]`; the innovation is
//! `z - mu - H x` with the yaw component wrapped.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    gate_frame_coords, measurement_to_odometry, wrap_angle, yaw_rotation, CartesianMeasurement,
    GatePose, Rot3, Vec3,
};

/// Innovation covariance condition numbers above this reject the update.
const MAX_CONDITION_NUMBER: f64 = 1e12;

/// Filter tuning exposed in the track file: per-tick process noise and the
/// prior uncertainty on the demonstrated gate poses, both as standard
/// deviations over `[x, y, z, yaw]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingConfig {
    pub process_sigma: [f64; 4],
    pub prior_sigma: [f64; 4],
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            process_sigma: [0.03, 0.03, 0.03, 0.02],
            prior_sigma: [1.0, 1.0, 1.0, 0.3],
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<(), crate::error::Error> {
        if self.process_sigma.iter().any(|&s| s < 0.0) {
            return Err(crate::error::Error::config(
                "mapping.process_sigma",
                "must be nonnegative",
            ));
        }
        if self.prior_sigma.iter().any(|&s| s <= 0.0) {
            return Err(crate::error::Error::config(
                "mapping.prior_sigma",
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// Gaussian belief over one gate's pose `[t_OG, phi_OG]` in the odometry
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GateBelief {
    pub mean: Vector4<f64>,
    pub covariance: Matrix4<f64>,
}

impl GateBelief {
    pub fn new(pose: &GatePose, covariance: Matrix4<f64>) -> Self {
        Self {
            mean: Vector4::new(pose.t.x, pose.t.y, pose.t.z, wrap_angle(pose.yaw)),
            covariance,
        }
    }

    pub fn position(&self) -> Vec3 {
        self.mean.fixed_rows::<3>(0).into_owned()
    }

    pub fn yaw(&self) -> f64 {
        self.mean[3]
    }

    /// The belief mean as a gate pose.
    pub fn pose(&self) -> GatePose {
        GatePose::new(self.position(), self.yaw())
    }
}

/// Body pose in the odometry frame as reported by the onboard odometry.
#[derive(Debug, Clone)]
pub struct BodyPoseEstimate {
    pub rotation: Rot3,
    pub translation: Vec3,
    pub yaw: f64,
}

impl BodyPoseEstimate {
    /// Builds a yaw-only body pose (the simulated vehicle never rolls or
    /// pitches).
    pub fn from_yaw(translation: Vec3, yaw: f64) -> Self {
        Self {
            rotation: yaw_rotation(yaw),
            translation,
            yaw: wrap_angle(yaw),
        }
    }
}

/// The filter map: one belief per gate in track order, plus the index of the
/// next gate to be passed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackMap {
    pub beliefs: Vec<GateBelief>,
    pub next_gate: usize,
    pub process_noise: Matrix4<f64>,
    pub prior_covariance: Matrix4<f64>,
    /// Whether the vehicle was on the approach (negative-x) side of the next
    /// gate's belief plane at the previous step. Both the belief plane and
    /// the odometry position jitter between steps, so traversal detection
    /// latches the side per step instead of requiring a single step to
    /// bracket the plane.
    approach_side: Option<bool>,
}

impl TrackMap {
    /// Initializes every belief at its nominal (demonstrated) pose with the
    /// prior covariance.
    pub fn from_nominal(
        nominal: &[GatePose],
        process_sigma: &[f64; 4],
        prior_sigma: &[f64; 4],
    ) -> Self {
        let process_noise = Matrix4::from_diagonal(&Vector4::from_row_slice(
            &process_sigma.map(|s| s * s),
        ));
        let prior_covariance = Matrix4::from_diagonal(&Vector4::from_row_slice(
            &prior_sigma.map(|s| s * s),
        ));
        Self {
            beliefs: nominal
                .iter()
                .map(|g| GateBelief::new(g, prior_covariance))
                .collect(),
            next_gate: 0,
            process_noise,
            prior_covariance,
            approach_side: None,
        }
    }

    pub fn num_gates(&self) -> usize {
        self.beliefs.len()
    }
}

/// Outcome of assigning one measurement to the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// The closest belief is the next gate; fuse it.
    Accepted(usize),
    /// The closest belief is some other gate; the measurement is discarded.
    Outlier { nearest: usize },
}

/// Update rejected because the innovation covariance is numerically
/// unusable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRejection {
    pub condition_number: f64,
}

/// Plane-crossing classification against a gate pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crossing {
    None,
    Passed,
    Missed,
}

/// What happened to the measurement inside one map step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeasurementOutcome {
    None,
    Fused { gate: usize },
    Outlier { nearest: usize },
    IllConditioned { gate: usize, condition_number: f64 },
}

/// Belief-frame traversal event from one map step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Traversal {
    None,
    Passed { gate: usize, lap_wrapped: bool },
    Missed { gate: usize },
}

/// Result of one map step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapStepResult {
    pub measurement: MeasurementOutcome,
    pub traversal: Traversal,
}

/// Prediction step: identity dynamics, covariance grows by the process
/// noise.
pub fn ekf_predict(belief: &GateBelief, process_noise: &Matrix4<f64>) -> GateBelief {
    GateBelief {
        mean: belief.mean,
        covariance: belief.covariance + process_noise,
    }
}

/// Joseph-form measurement update.
///
/// Returns the posterior belief, or a rejection (prior unchanged) when the
/// innovation covariance condition number exceeds 1e12.
pub fn ekf_update(
    belief: &GateBelief,
    z: &CartesianMeasurement,
    body: &BodyPoseEstimate,
) -> Result<GateBelief, UpdateRejection> {
    let r_ob_inv = body.rotation.inverse();
    let mut h = Matrix4::identity();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(r_ob_inv.matrix());

    let mu_t = -(r_ob_inv * body.translation);
    let mu = Vector4::new(mu_t.x, mu_t.y, mu_t.z, -body.yaw);

    let mut innovation = z.mean - mu - h * belief.mean;
    innovation[3] = wrap_angle(innovation[3]);

    let s = z.covariance + h * belief.covariance * h.transpose();
    let s = 0.5 * (s + s.transpose());
    let singular = s.singular_values();
    let (smax, smin) = (singular.max(), singular.min());
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition_number > MAX_CONDITION_NUMBER {
        return Err(UpdateRejection { condition_number });
    }
    let s_inv = s.try_inverse().ok_or(UpdateRejection {
        condition_number: f64::INFINITY,
    })?;

    let gain = belief.covariance * h.transpose() * s_inv;
    let mut mean = belief.mean + gain * innovation;
    mean[3] = wrap_angle(mean[3]);

    let i_kh = Matrix4::identity() - gain * h;
    let covariance =
        i_kh * belief.covariance * i_kh.transpose() + gain * z.covariance * gain.transpose();
    Ok(GateBelief {
        mean,
        covariance: 0.5 * (covariance + covariance.transpose()),
    })
}

/// Assigns a measurement to the closest belief (ties broken by lowest
/// index). Anything other than the next gate is an outlier.
pub fn assign_measurement(
    map: &TrackMap,
    z: &CartesianMeasurement,
    body: &BodyPoseEstimate,
) -> Assignment {
    let (t_og, _) = measurement_to_odometry(
        &z.translation(),
        z.yaw(),
        &body.rotation,
        &body.translation,
        body.yaw,
    );
    let mut nearest = 0;
    let mut best = f64::INFINITY;
    for (i, belief) in map.beliefs.iter().enumerate() {
        let d = (belief.position() - t_og).norm();
        if d < best {
            best = d;
            nearest = i;
        }
    }
    if nearest == map.next_gate {
        Assignment::Accepted(nearest)
    } else {
        Assignment::Outlier { nearest }
    }
}

/// Aperture test at the plane-intersection point of the segment from `p` to
/// `c` in gate-frame coordinates. Falls back to the endpoint when the
/// segment does not bracket the plane.
fn classify_plane_point(p: &Vec3, c: &Vec3, aperture: (f64, f64)) -> Crossing {
    let (y, z) = if p.x < 0.0 && c.x >= 0.0 {
        let lambda = -p.x / (c.x - p.x);
        (p.y + lambda * (c.y - p.y), p.z + lambda * (c.z - p.z))
    } else {
        (c.y, c.z)
    };
    if y.abs() <= aperture.0 && z.abs() <= aperture.1 {
        Crossing::Passed
    } else {
        Crossing::Missed
    }
}

/// Plane-crossing test in the frame of `gate`: a crossing happens when the
/// gate-frame x-coordinate goes from negative to nonnegative between two
/// consecutive positions. The crossing passes if the interpolated
/// intersection point lies inside the aperture half-extents.
pub fn check_traversal(
    prev: &Vec3,
    curr: &Vec3,
    gate: &GatePose,
    aperture: (f64, f64),
) -> Crossing {
    let p = gate_frame_coords(prev, gate);
    let c = gate_frame_coords(curr, gate);
    if !(p.x < 0.0 && c.x >= 0.0) {
        return Crossing::None;
    }
    classify_plane_point(&p, &c, aperture)
}

/// One mapping cycle: predict every belief, fuse an accepted measurement
/// into the next gate, then check for a belief-frame traversal and advance
/// the gate pointer on a pass.
///
/// `prev_pos`/`curr_pos` are the odometry-frame vehicle positions bracketing
/// this tick; `aperture` is the next gate's half-extents.
pub fn map_step(
    map: &mut TrackMap,
    measurement: Option<&crate::geometry::PolarMeasurement>,
    body: &BodyPoseEstimate,
    prev_pos: &Vec3,
    curr_pos: &Vec3,
    aperture: (f64, f64),
) -> MapStepResult {
    for belief in &mut map.beliefs {
        *belief = ekf_predict(belief, &map.process_noise);
    }

    let measurement_outcome = match measurement {
        None => MeasurementOutcome::None,
        Some(m) => {
            let z = CartesianMeasurement::from_polar(m);
            match assign_measurement(map, &z, body) {
                Assignment::Outlier { nearest } => MeasurementOutcome::Outlier { nearest },
                Assignment::Accepted(gate) => match ekf_update(&map.beliefs[gate], &z, body) {
                    Ok(updated) => {
                        map.beliefs[gate] = updated;
                        MeasurementOutcome::Fused { gate }
                    }
                    Err(rejection) => MeasurementOutcome::IllConditioned {
                        gate,
                        condition_number: rejection.condition_number,
                    },
                },
            }
        }
    };

    let gate = map.next_gate;
    let pose = map.beliefs[gate].pose();
    let p = gate_frame_coords(prev_pos, &pose);
    let c = gate_frame_coords(curr_pos, &pose);
    let was_in_front = map.approach_side.unwrap_or(p.x < 0.0);
    let crossing = if was_in_front && c.x >= 0.0 {
        classify_plane_point(&p, &c, aperture)
    } else {
        Crossing::None
    };
    let traversal = match crossing {
        Crossing::None | Crossing::Missed => {
            map.approach_side = Some(c.x < 0.0);
            match crossing {
                Crossing::Missed => Traversal::Missed { gate },
                _ => Traversal::None,
            }
        }
        Crossing::Passed => {
            map.next_gate = (gate + 1) % map.num_gates();
            map.approach_side = None;
            Traversal::Passed {
                gate,
                lap_wrapped: map.next_gate == 0,
            }
        }
    };

    MapStepResult {
        measurement: measurement_outcome,
        traversal,
    }
}
