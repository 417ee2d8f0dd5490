//! Synthetic perception source: given the true relative pose of the closest
//! visible gate, emits a noisy polar measurement with self-reported variance.
//!
//! The source is deliberately imperfect in the same ways a learned detector
//! is: range noise grows with distance, yaw noise grows as the gate turns
//! edge-on, and the reported variance can be made over- or under-confident
//! through a miscalibration factor. It measures the closest visible gate,
//! not the next gate in sequence, so the mapping layer's outlier rejection
//! gets exercised by wrong-gate measurements.

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{wrap_angle, yaw_rotation, GatePose, PolarMeasurement, Vec3};

/// Pinhole-style visibility proxy: view frustum half-angles plus a usable
/// range band. The camera looks along the body +x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    pub horizontal_half_fov: f64,
    pub vertical_half_fov: f64,
    pub max_range: f64,
    pub min_range: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            horizontal_half_fov: 45f64.to_radians(),
            vertical_half_fov: 30f64.to_radians(),
            max_range: 20.0,
            min_range: 0.3,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), Error> {
        let half_pi = std::f64::consts::FRAC_PI_2;
        if !(self.horizontal_half_fov > 0.0 && self.horizontal_half_fov < half_pi) {
            return Err(Error::config(
                "camera.horizontal_half_fov",
                "must lie in (0, pi/2)",
            ));
        }
        if !(self.vertical_half_fov > 0.0 && self.vertical_half_fov < half_pi) {
            return Err(Error::config(
                "camera.vertical_half_fov",
                "must lie in (0, pi/2)",
            ));
        }
        if !(self.min_range > 0.0 && self.min_range < self.max_range) {
            return Err(Error::config(
                "camera.min_range",
                "must satisfy 0 < min_range < max_range",
            ));
        }
        Ok(())
    }
}

/// Generative noise model for the synthetic detector.
///
/// Effective standard deviations at a true relative pose:
/// `sigma_r = base_sigma[0] * (1 + range_growth * r)` and
/// `sigma_phi = base_sigma[3] * (1 + angle_growth * (1/max(cos alpha, 0.1) - 1))`
/// where `alpha` is the viewing angle off the gate normal; theta and psi use
/// their base sigmas unchanged. The reported variance is the generative
/// variance times `miscalibration_factor`, so a factor of 1 is calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub base_sigma: [f64; 4],
    pub range_growth: f64,
    pub angle_growth: f64,
    pub miscalibration_factor: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            base_sigma: [0.10, 0.015, 0.015, 0.04],
            range_growth: 0.08,
            angle_growth: 1.0,
            miscalibration_factor: 1.0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), Error> {
        if self.base_sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("noise.base_sigma", "all sigmas must be positive"));
        }
        if self.range_growth < 0.0 || self.angle_growth < 0.0 {
            return Err(Error::config(
                "noise.range_growth",
                "growth factors must be nonnegative",
            ));
        }
        if self.miscalibration_factor <= 0.0 {
            return Err(Error::config(
                "noise.miscalibration_factor",
                "must be positive",
            ));
        }
        Ok(())
    }

    /// Generative standard deviations evaluated at a true relative polar pose.
    pub fn sigmas_at(&self, true_polar: &[f64; 4]) -> [f64; 4] {
        let [r, theta, psi, phi] = *true_polar;
        // Viewing angle off the gate normal: cos(alpha) = sin(theta)cos(psi - phi).
        let cos_alpha = theta.sin() * (psi - phi).cos();
        let edge_factor = 1.0 / cos_alpha.max(0.1);
        [
            self.base_sigma[0] * (1.0 + self.range_growth * r),
            self.base_sigma[1],
            self.base_sigma[2],
            self.base_sigma[3] * (1.0 + self.angle_growth * (edge_factor - 1.0)),
        ]
    }
}

/// Contract for anything that can stand in for the perception system:
/// given the true body pose and track, either a measurement of some visible
/// gate or nothing. Implementations must be deterministic given the rng
/// state.
pub trait MeasurementSource {
    fn sample(
        &self,
        body_t: &Vec3,
        body_yaw: f64,
        track: &[GatePose],
        time: f64,
        rng: &mut dyn RngCore,
    ) -> Option<PolarMeasurement>;
}

/// The default oracle: frustum/range/facing visibility against the true
/// track, then Gaussian noise per [`NoiseModel`].
#[derive(Debug, Clone)]
pub struct PerceptionOracle {
    pub camera: CameraModel,
    pub noise: NoiseModel,
}

impl MeasurementSource for PerceptionOracle {
    fn sample(
        &self,
        body_t: &Vec3,
        body_yaw: f64,
        track: &[GatePose],
        _time: f64,
        rng: &mut dyn RngCore,
    ) -> Option<PolarMeasurement> {
        let idx = select_visible_gate(body_t, body_yaw, track, &self.camera)?;
        let truth = relative_polar(body_t, body_yaw, &track[idx]);
        Some(synthesize_measurement(&truth, &self.noise, rng))
    }
}

/// True relative pose of a gate in body polar coordinates.
pub fn relative_polar(body_t: &Vec3, body_yaw: f64, gate: &GatePose) -> [f64; 4] {
    let d_body = yaw_rotation(body_yaw).inverse() * (gate.t - body_t);
    crate::geometry::cartesian_to_polar(&d_body, gate.yaw - body_yaw)
}

/// Whether a single gate passes the frustum, range-band, and facing tests.
pub fn gate_visible(body_t: &Vec3, body_yaw: f64, gate: &GatePose, camera: &CameraModel) -> bool {
    let d_world = gate.t - body_t;
    let d_body = yaw_rotation(body_yaw).inverse() * d_world;
    let range = d_body.norm();
    if range < camera.min_range || range > camera.max_range {
        return false;
    }
    let azimuth = d_body.y.atan2(d_body.x);
    if azimuth.abs() > camera.horizontal_half_fov {
        return false;
    }
    let elevation = d_body.z.atan2(d_body.xy().norm());
    if elevation.abs() > camera.vertical_half_fov {
        return false;
    }
    // Facing: angle between the gate normal and the line of sight below pi/2,
    // i.e. the camera sees the approach face, not the back of the gate.
    let normal = Vec3::new(gate.yaw.cos(), gate.yaw.sin(), 0.0);
    normal.dot(&d_world) > 0.0
}

/// Index of the nearest gate that is inside the view frustum and range band
/// with its front face toward the camera, or `None` if no gate qualifies.
pub fn select_visible_gate(
    body_t: &Vec3,
    body_yaw: f64,
    track: &[GatePose],
    camera: &CameraModel,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, gate) in track.iter().enumerate() {
        if !gate_visible(body_t, body_yaw, gate, camera) {
            continue;
        }
        let range = (gate.t - body_t).norm();
        if best.is_none_or(|(_, r)| range < r) {
            best = Some((i, range));
        }
    }
    best.map(|(i, _)| i)
}

/// Draws a noisy measurement of a true relative pose. The mean is the truth
/// plus independent zero-mean Gaussian noise with the model's standard
/// deviations; the reported variance is the generative variance times the
/// miscalibration factor. Angles are re-wrapped, theta stays in [0, pi], and
/// the range stays positive.
pub fn synthesize_measurement(
    true_polar: &[f64; 4],
    noise: &NoiseModel,
    rng: &mut dyn RngCore,
) -> PolarMeasurement {
    let sigmas = noise.sigmas_at(true_polar);
    let mut mean = [0.0; 4];
    for j in 0..4 {
        let draw = Normal::new(0.0, sigmas[j]).expect("validated sigma").sample(rng);
        mean[j] = true_polar[j] + draw;
    }
    mean[0] = mean[0].max(1e-6);
    mean[1] = mean[1].clamp(0.0, std::f64::consts::PI);
    mean[2] = wrap_angle(mean[2]);
    mean[3] = wrap_angle(mean[3]);
    let variance = sigmas.map(|s| s * s * noise.miscalibration_factor);
    PolarMeasurement { mean, variance }
}

/// Negative log-likelihood (up to a constant) of the truth under the
/// measurement's reported Gaussian: `sum_j log(var_j) + resid_j^2 / var_j`,
/// with angle residuals wrapped.
pub fn measurement_nll(truth: &[f64; 4], m: &PolarMeasurement) -> Result<f64, Error> {
    let mut nll = 0.0;
    for (j, (&y, (&z, &var))) in truth
        .iter()
        .zip(m.mean.iter().zip(m.variance.iter()))
        .enumerate()
    {
        if var <= 0.0 {
            return Err(Error::invalid("measurement variance must be positive"));
        }
        let resid = if j == 0 { y - z } else { wrap_angle(y - z) };
        nll += var.ln() + resid * resid / var;
    }
    Ok(nll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn straight_ahead_gate(dist: f64) -> GatePose {
        GatePose::new(Vec3::new(dist, 0.0, 0.0), 0.0)
    }

    #[test]
    fn select_on_axis_gate() {
        let camera = CameraModel::default();
        let track = vec![straight_ahead_gate(3.0)];
        assert_eq!(
            select_visible_gate(&Vec3::zeros(), 0.0, &track, &camera),
            Some(0)
        );
    }

    #[test]
    fn gate_behind_is_invisible() {
        let camera = CameraModel::default();
        let track = vec![GatePose::new(Vec3::new(-3.0, 0.0, 0.0), 0.0)];
        assert_eq!(select_visible_gate(&Vec3::zeros(), 0.0, &track, &camera), None);
    }

    #[test]
    fn nearest_of_two_wins() {
        let camera = CameraModel::default();
        let track = vec![straight_ahead_gate(6.0), straight_ahead_gate(3.0)];
        assert_eq!(
            select_visible_gate(&Vec3::zeros(), 0.0, &track, &camera),
            Some(1)
        );
    }

    #[test]
    fn back_of_gate_is_invisible() {
        let camera = CameraModel::default();
        // Camera turned around, looking straight at the back face of a gate
        // whose traversal direction points away from it.
        let track = vec![GatePose::new(Vec3::new(-3.0, 0.0, 0.0), 0.0)];
        assert_eq!(select_visible_gate(&Vec3::zeros(), PI, &track, &camera), None);
        // The same relative geometry from the approach side is visible.
        let track = vec![GatePose::new(Vec3::new(3.0, 0.0, 0.0), 0.0)];
        assert_eq!(select_visible_gate(&Vec3::zeros(), 0.0, &track, &camera), Some(0));
    }

    #[test]
    fn shrinking_fov_never_reveals_gates() {
        let wide = CameraModel::default();
        let narrow = CameraModel {
            horizontal_half_fov: wide.horizontal_half_fov * 0.4,
            vertical_half_fov: wide.vertical_half_fov * 0.4,
            max_range: wide.max_range * 0.6,
            ..wide
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let gate = GatePose::new(
                Vec3::new(
                    rng.gen_range(-15.0..15.0),
                    rng.gen_range(-15.0..15.0),
                    rng.gen_range(-3.0..3.0),
                ),
                rng.gen_range(-PI..PI),
            );
            let yaw = rng.gen_range(-PI..PI);
            if gate_visible(&Vec3::zeros(), yaw, &gate, &narrow) {
                assert!(gate_visible(&Vec3::zeros(), yaw, &gate, &wide));
            }
        }
    }

    #[test]
    fn noiseless_limit_returns_truth() {
        let noise = NoiseModel {
            base_sigma: [1e-12; 4],
            range_growth: 0.0,
            angle_growth: 0.0,
            miscalibration_factor: 1.0,
        };
        let truth = [4.0, PI / 2.0, 0.2, -0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = synthesize_measurement(&truth, &noise, &mut rng);
        for (j, &y) in truth.iter().enumerate() {
            assert_abs_diff_eq!(m.mean[j], y, epsilon = 1e-9);
            assert!(m.variance[j] < 1e-20);
        }
    }

    #[test]
    fn fixed_seed_reproduces_measurement() {
        let noise = NoiseModel::default();
        let truth = [5.0, PI / 2.0, 0.1, 0.3];
        let a = synthesize_measurement(&truth, &noise, &mut ChaCha8Rng::seed_from_u64(42));
        let b = synthesize_measurement(&truth, &noise, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn reported_variance_matches_empirical() {
        let noise = NoiseModel::default();
        let truth = [5.0, PI / 2.0, 0.1, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut sums = [0.0; 4];
        let mut sq_sums = [0.0; 4];
        let mut reported = [0.0; 4];
        for _ in 0..n {
            let m = synthesize_measurement(&truth, &noise, &mut rng);
            reported = m.variance;
            for j in 0..4 {
                let resid = if j == 0 {
                    m.mean[j] - truth[j]
                } else {
                    wrap_angle(m.mean[j] - truth[j])
                };
                sums[j] += resid;
                sq_sums[j] += resid * resid;
            }
        }
        for j in 0..4 {
            let mean = sums[j] / n as f64;
            let var = sq_sums[j] / n as f64 - mean * mean;
            let rel = (var - reported[j]).abs() / reported[j];
            assert!(rel < 0.05, "component {j}: empirical {var} vs reported {}", reported[j]);
        }
    }

    #[test]
    fn normalized_residuals_are_calibrated() {
        let noise = NoiseModel::default();
        let truth = [6.0, PI / 2.0, -0.3, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut sums = [0.0; 4];
        let mut sq_sums = [0.0; 4];
        for _ in 0..n {
            let m = synthesize_measurement(&truth, &noise, &mut rng);
            for j in 0..4 {
                let resid = if j == 0 {
                    truth[j] - m.mean[j]
                } else {
                    wrap_angle(truth[j] - m.mean[j])
                };
                let z = resid / m.variance[j].sqrt();
                sums[j] += z;
                sq_sums[j] += z * z;
            }
        }
        for j in 0..4 {
            let mean = sums[j] / n as f64;
            let var = sq_sums[j] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.02, "component {j} mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "component {j} variance {var}");
        }
    }

    #[test]
    fn nll_examples() {
        let m = PolarMeasurement::new([3.0, 1.0, 0.5, -0.5], [1.0; 4]).unwrap();
        assert_abs_diff_eq!(measurement_nll(&m.mean, &m).unwrap(), 0.0, epsilon = 1e-12);

        let m = PolarMeasurement::new([3.0, 1.0, 0.5, -0.5], [2.0; 4]).unwrap();
        assert_abs_diff_eq!(
            measurement_nll(&m.mean, &m).unwrap(),
            4.0 * 2f64.ln(),
            epsilon = 1e-12
        );

        let bad = PolarMeasurement { mean: [1.0; 4], variance: [0.0; 4] };
        assert!(measurement_nll(&[1.0; 4], &bad).is_err());
    }

    #[test]
    fn calibration_minimizes_mean_nll() {
        let truth = [5.0, PI / 2.0, 0.1, 0.2];
        let mean_nll = |factor: f64, seed: u64| {
            let noise = NoiseModel {
                miscalibration_factor: factor,
                ..NoiseModel::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 10_000;
            let mut total = 0.0;
            for _ in 0..n {
                let m = synthesize_measurement(&truth, &noise, &mut rng);
                total += measurement_nll(&truth, &m).unwrap();
            }
            total / n as f64
        };
        let calibrated = mean_nll(1.0, 3);
        assert!(calibrated < mean_nll(4.0, 3));
        assert!(calibrated < mean_nll(0.25, 3));
    }
}
