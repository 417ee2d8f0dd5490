//! Frames, rotations, angle arithmetic, and the polar-to-Cartesian
//! measurement conversion with first-order covariance propagation.
//!
//! Conventions: body frame x forward, y left, z up. A gate straight ahead of
//! the camera sits at polar angles `theta = pi/2`, `psi = 0`. Gates are
//! upright, so their orientation is a single yaw about the world z-axis and
//! the traversal direction is the gate frame +x axis. All angles live in
//! `(-pi, pi]`, with ties at pi mapping to pi.

use nalgebra::{Matrix4, Rotation3, Vector3, Vector4};
use std::f64::consts::PI;

use crate::error::Error;

/// Translation or velocity in meters (m/s), depending on context.
pub type Vec3 = Vector3<f64>;

/// A 3x3 rotation matrix, orthonormal with determinant +1.
pub type Rot3 = Rotation3<f64>;

/// Yaw-only rotation about the world z-axis.
pub fn yaw_rotation(yaw: f64) -> Rot3 {
    Rot3::from_axis_angle(&Vector3::z_axis(), yaw)
}

/// Pose of an upright gate: center position plus yaw about the world z-axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatePose {
    pub t: Vec3,
    pub yaw: f64,
}

impl GatePose {
    /// Builds a gate pose, wrapping the yaw into `(-pi, pi]`.
    pub fn new(t: Vec3, yaw: f64) -> Self {
        Self {
            t,
            yaw: wrap_angle(yaw),
        }
    }

    /// Rotation from the gate frame into the world/odometry frame.
    pub fn rotation(&self) -> Rot3 {
        yaw_rotation(self.yaw)
    }
}

/// Relative gate pose in spherical coordinates plus per-component variance:
/// range `r`, polar angle `theta`, azimuth `psi`, and relative yaw `phi`,
/// with variances in the same units squared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarMeasurement {
    pub mean: [f64; 4],
    pub variance: [f64; 4],
}

impl PolarMeasurement {
    /// Validates the measurement invariants: `r > 0`, `theta` in `[0, pi]`,
    /// `psi`/`phi` in `(-pi, pi]`, variances positive and finite.
    pub fn new(mean: [f64; 4], variance: [f64; 4]) -> Result<Self, Error> {
        let [r, theta, psi, phi] = mean;
        if !mean.iter().chain(variance.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("polar measurement contains non-finite values"));
        }
        if r <= 0.0 {
            return Err(Error::invalid("polar measurement range must be positive"));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(Error::invalid("polar angle theta must lie in [0, pi]"));
        }
        for a in [psi, phi] {
            if a <= -PI || a > PI {
                return Err(Error::invalid("azimuth and yaw must lie in (-pi, pi]"));
            }
        }
        if variance.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("polar measurement variances must be positive"));
        }
        Ok(Self { mean, variance })
    }
}

/// Relative gate pose in Cartesian coordinates: translation plus relative
/// yaw, with a full 4x4 covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianMeasurement {
    /// `[x, y, z, phi]` of the gate in the body frame.
    pub mean: Vector4<f64>,
    pub covariance: Matrix4<f64>,
}

impl CartesianMeasurement {
    /// Converts a polar measurement: mean via the spherical-to-Cartesian map,
    /// covariance via first-order propagation through its Jacobian.
    pub fn from_polar(m: &PolarMeasurement) -> Self {
        Self {
            mean: polar_to_cartesian(m),
            covariance: polar_cov_to_cartesian(m),
        }
    }

    pub fn translation(&self) -> Vec3 {
        self.mean.fixed_rows::<3>(0).into_owned()
    }

    pub fn yaw(&self) -> f64 {
        self.mean[3]
    }
}

/// Wraps an angle into `(-pi, pi]`. Ties at the boundary map to `pi`.
///
/// Panics if `a` is not finite.
pub fn wrap_angle(a: f64) -> f64 {
    assert!(a.is_finite(), "cannot wrap non-finite angle {a}");
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Spherical-to-Cartesian conversion of the measurement mean:
/// `x = r sin(theta) cos(psi)`, `y = r sin(theta) sin(psi)`,
/// `z = r cos(theta)`, yaw passed through.
pub fn polar_to_cartesian(m: &PolarMeasurement) -> Vector4<f64> {
    let [r, theta, psi, phi] = m.mean;
    Vector4::new(
        r * theta.sin() * psi.cos(),
        r * theta.sin() * psi.sin(),
        r * theta.cos(),
        phi,
    )
}

/// Analytic Jacobian of [`polar_to_cartesian`] with respect to
/// `[r, theta, psi, phi]`, evaluated at the measurement mean.
pub fn polar_jacobian(mean: &[f64; 4]) -> Matrix4<f64> {
    let [r, theta, psi, _] = *mean;
    let (st, ct) = (theta.sin(), theta.cos());
    let (sp, cp) = (psi.sin(), psi.cos());
    Matrix4::new(
        st * cp, r * ct * cp, -r * st * sp, 0.0, //
        st * sp, r * ct * sp, r * st * cp, 0.0, //
        ct, -r * st, 0.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

/// First-order covariance propagation `J diag(variance) J^T` through the
/// conversion Jacobian. The result is symmetrized against roundoff.
pub fn polar_cov_to_cartesian(m: &PolarMeasurement) -> Matrix4<f64> {
    let j = polar_jacobian(&m.mean);
    let sigma_pol = Matrix4::from_diagonal(&Vector4::from_row_slice(&m.variance));
    let cov = j * sigma_pol * j.transpose();
    0.5 * (cov + cov.transpose())
}

/// Inverse of [`polar_to_cartesian`]: recovers `[r, theta, psi, phi]` from a
/// relative translation and yaw. Requires a nonzero translation.
pub fn cartesian_to_polar(t: &Vec3, phi: f64) -> [f64; 4] {
    let r = t.norm();
    let theta = (t.z / r).clamp(-1.0, 1.0).acos();
    let psi = t.y.atan2(t.x);
    [r, theta, psi, wrap_angle(phi)]
}

/// Expresses a position in the coordinate frame of a gate. The x-component
/// is positive once the point is past the gate plane along the traversal
/// direction.
pub fn gate_frame_coords(point: &Vec3, gate: &GatePose) -> Vec3 {
    gate.rotation().inverse() * (point - gate.t)
}

/// Transforms a body-frame measurement into the odometry frame:
/// `t_OG = R_OB t_BG + t_OB`, `phi_OG = wrap(phi_BG + phi_OB)`.
pub fn measurement_to_odometry(
    t_bg: &Vec3,
    phi_bg: f64,
    r_ob: &Rot3,
    t_ob: &Vec3,
    phi_ob: f64,
) -> (Vec3, f64) {
    (r_ob * t_bg + t_ob, wrap_angle(phi_bg + phi_ob))
}

/// Test-only helpers shared across module and integration tests.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use rand::Rng;

    /// A random valid polar measurement, usable as a generic EKF input.
    pub(crate) fn random_polar(rng: &mut impl Rng) -> PolarMeasurement {
        let mean = [
            rng.gen_range(0.5..20.0),
            rng.gen_range(0.2..(PI - 0.2)),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        ];
        let variance = [
            rng.gen_range(1e-4..0.5),
            rng.gen_range(1e-4..0.1),
            rng.gen_range(1e-4..0.1),
            rng.gen_range(1e-4..0.2),
        ];
        PolarMeasurement::new(mean, variance).unwrap()
    }

    /// Central finite-difference Jacobian of the conversion map, independent
    /// of the analytic expression it checks.
    pub(crate) fn finite_difference_jacobian(mean: &[f64; 4], step: f64) -> Matrix4<f64> {
        let f = |m: &[f64; 4]| {
            let [r, theta, psi, phi] = *m;
            Vector4::new(
                r * theta.sin() * psi.cos(),
                r * theta.sin() * psi.sin(),
                r * theta.cos(),
                phi,
            )
        };
        let mut j = Matrix4::zeros();
        for col in 0..4 {
            let mut hi = *mean;
            let mut lo = *mean;
            hi[col] += step;
            lo[col] -= step;
            let d = (f(&hi) - f(&lo)) / (2.0 * step);
            j.set_column(col, &d);
        }
        j
    }
}
