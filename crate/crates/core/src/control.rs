//! Receding-horizon tracking controller on a double-integrator-with-yaw
//! vehicle model, with box input constraints.
//!
//! The solver runs an affine Riccati sweep for the unconstrained
//! linear-quadratic tracking problem, rolls the feedback policy forward with
//! input clamping, and then refines the input sequence by projected gradient
//! descent with a backtracking line search until the cost decrease falls
//! below 1e-8 or 50 iterations. On constraint-inactive instances the Riccati
//! sweep already is the exact optimum, which is what the dense
//! least-squares oracle in the tests checks.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{wrap_angle, Vec3};
use crate::planning::ReferencePath;

type Vec7 = SVector<f64, 7>;
type Vec4 = SVector<f64, 4>;
type Mat7 = SMatrix<f64, 7, 7>;
type Mat74 = SMatrix<f64, 7, 4>;
type Mat4 = SMatrix<f64, 4, 4>;

/// Simulated vehicle state: position, velocity, yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub p: Vec3,
    pub v: Vec3,
    pub yaw: f64,
}

impl QuadState {
    pub fn at_rest(p: Vec3, yaw: f64) -> Self {
        Self {
            p,
            v: Vec3::zeros(),
            yaw: wrap_angle(yaw),
        }
    }
}

/// Commanded acceleration and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput {
    pub accel: Vec3,
    pub yaw_rate: f64,
}

impl ControlInput {
    pub fn zero() -> Self {
        Self {
            accel: Vec3::zeros(),
            yaw_rate: 0.0,
        }
    }
}

/// One step of the tracking reference: position, velocity vector, yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub p: Vec3,
    pub v: Vec3,
    pub yaw: f64,
}

/// Receding-horizon controller configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon_steps: usize,
    pub dt: f64,
    /// Diagonal state weights: position (3), velocity (3), yaw.
    pub q_diag: [f64; 7],
    /// Diagonal input weights: acceleration (3), yaw rate.
    pub r_diag: [f64; 4],
    /// Componentwise acceleration bound, m/s^2.
    pub a_max: f64,
    /// Yaw rate bound, rad/s.
    pub omega_max: f64,
    /// Cap on the reference marching speed, m/s.
    pub v_max: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 20,
            dt: 0.1,
            q_diag: [10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0],
            r_diag: [0.1, 0.1, 0.1, 0.1],
            a_max: 8.0,
            omega_max: 3.0,
            v_max: 10.0,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.horizon_steps < 1 {
            return Err(Error::config("controller.horizon_steps", "must be >= 1"));
        }
        if self.dt <= 0.0 {
            return Err(Error::config("controller.dt", "must be positive"));
        }
        if self.q_diag.iter().any(|&q| q < 0.0) {
            return Err(Error::config("controller.q_diag", "must be nonnegative"));
        }
        if self.r_diag.iter().any(|&r| r <= 0.0) {
            return Err(Error::config("controller.r_diag", "must be positive"));
        }
        if self.a_max <= 0.0 || self.omega_max <= 0.0 || self.v_max <= 0.0 {
            return Err(Error::config("controller.a_max", "bounds must be positive"));
        }
        Ok(())
    }

    fn q_matrix(&self) -> Mat7 {
        Mat7::from_diagonal(&Vec7::from_row_slice(&self.q_diag))
    }

    fn r_matrix(&self) -> Mat4 {
        Mat4::from_diagonal(&Vec4::from_row_slice(&self.r_diag))
    }

    /// Discrete dynamics matrices for the double integrator with yaw.
    fn dynamics(&self) -> (Mat7, Mat74) {
        let dt = self.dt;
        let mut a = Mat7::identity();
        for i in 0..3 {
            a[(i, i + 3)] = dt;
        }
        let mut b = Mat74::zeros();
        for i in 0..3 {
            b[(i, i)] = 0.5 * dt * dt;
            b[(i + 3, i)] = dt;
        }
        b[(6, 3)] = dt;
        (a, b)
    }

    fn clamp(&self, u: &Vec4) -> Vec4 {
        Vec4::new(
            u[0].clamp(-self.a_max, self.a_max),
            u[1].clamp(-self.a_max, self.a_max),
            u[2].clamp(-self.a_max, self.a_max),
            u[3].clamp(-self.omega_max, self.omega_max),
        )
    }
}

/// Exact discrete double-integrator step:
/// `p' = p + v dt + a dt^2 / 2`, `v' = v + a dt`, `yaw' = wrap(yaw + w dt)`.
pub fn propagate_dynamics(x: &QuadState, u: &ControlInput, dt: f64) -> QuadState {
    QuadState {
        p: x.p + x.v * dt + 0.5 * u.accel * dt * dt,
        v: x.v + u.accel * dt,
        yaw: wrap_angle(x.yaw + u.yaw_rate * dt),
    }
}

/// The optimized input sequence, its state rollout, and its cost.
#[derive(Debug, Clone)]
pub struct Plan {
    pub inputs: Vec<ControlInput>,
    pub states: Vec<QuadState>,
    pub cost: f64,
}

fn state_to_vec(x: &QuadState) -> Vec7 {
    Vec7::from_column_slice(&[x.p.x, x.p.y, x.p.z, x.v.x, x.v.y, x.v.z, x.yaw])
}

fn vec_to_state(v: &Vec7) -> QuadState {
    QuadState {
        p: Vec3::new(v[0], v[1], v[2]),
        v: Vec3::new(v[3], v[4], v[5]),
        yaw: wrap_angle(v[6]),
    }
}

fn vec_to_input(v: &Vec4) -> ControlInput {
    ControlInput {
        accel: Vec3::new(v[0], v[1], v[2]),
        yaw_rate: v[3],
    }
}

struct Problem {
    a: Mat7,
    b: Mat74,
    q: Mat7,
    r: Mat4,
    /// Reference states r_1..r_H with yaw unwrapped relative to x0.
    refs: Vec<Vec7>,
    x0: Vec7,
}

impl Problem {
    fn rollout(&self, inputs: &[Vec4]) -> Vec<Vec7> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(self.x0);
        for u in inputs {
            let last = states.last().unwrap();
            states.push(self.a * last + self.b * u);
        }
        states
    }

    fn cost(&self, inputs: &[Vec4]) -> f64 {
        let states = self.rollout(inputs);
        let mut j = 0.0;
        for (k, u) in inputs.iter().enumerate() {
            let e = states[k + 1] - self.refs[k];
            j += (e.transpose() * self.q * e)[(0, 0)];
            j += (u.transpose() * self.r * u)[(0, 0)];
        }
        j
    }

    /// Gradient of the cost with respect to the stacked inputs, via the
    /// adjoint recursion.
    fn gradient(&self, inputs: &[Vec4], states: &[Vec7]) -> Vec<Vec4> {
        let h = inputs.len();
        let mut grad = vec![Vec4::zeros(); h];
        let mut lambda = Vec7::zeros();
        for k in (0..h).rev() {
            let e = states[k + 1] - self.refs[k];
            let stage = 2.0 * (self.q * e);
            let adj = stage + lambda;
            grad[k] = 2.0 * (self.r * inputs[k]) + self.b.transpose() * adj;
            lambda = self.a.transpose() * adj;
        }
        grad
    }
}

/// Solves the discretized quadratic tracking problem subject to the
/// double-integrator dynamics and box input constraints. Returns the first
/// input of the plan and the full plan.
pub fn solve_receding_horizon(
    x0: &QuadState,
    refs: &[ReferencePoint],
    cfg: &MpcConfig,
) -> Result<(ControlInput, Plan), Error> {
    if refs.len() != cfg.horizon_steps {
        return Err(Error::invalid(format!(
            "reference has {} entries, horizon needs {}",
            refs.len(),
            cfg.horizon_steps
        )));
    }
    for r in refs {
        if !(r.p.iter().all(|v| v.is_finite())
            && r.v.iter().all(|v| v.is_finite())
            && r.yaw.is_finite())
        {
            return Err(Error::invalid("non-finite reference"));
        }
    }

    let (a, b) = cfg.dynamics();
    // Unwrap reference yaws into a continuous sequence near the current yaw.
    let mut prev_yaw = x0.yaw;
    let refs_vec: Vec<Vec7> = refs
        .iter()
        .map(|r| {
            let yaw = prev_yaw + wrap_angle(r.yaw - prev_yaw);
            prev_yaw = yaw;
            Vec7::from_column_slice(&[r.p.x, r.p.y, r.p.z, r.v.x, r.v.y, r.v.z, yaw])
        })
        .collect();
    let problem = Problem {
        a,
        b,
        q: cfg.q_matrix(),
        r: cfg.r_matrix(),
        refs: refs_vec,
        x0: state_to_vec(x0),
    };
    let h = cfg.horizon_steps;

    // Affine Riccati sweep for the unconstrained tracking problem.
    // Cost-to-go after arriving in state x at step k (stage cost already
    // paid): G_k(x) = x' P x + 2 q' x + const, with G_H = 0.
    let mut p_mat = Mat7::zeros();
    let mut q_vec = Vec7::zeros();
    let mut gains: Vec<(SMatrix<f64, 4, 7>, Vec4)> = Vec::with_capacity(h);
    for k in (0..h).rev() {
        let p_bar = problem.q + p_mat;
        let q_bar = -(problem.q * problem.refs[k]) + q_vec;
        let huu = problem.r + b.transpose() * p_bar * b;
        let huu_inv = huu.try_inverse().ok_or_else(|| {
            Error::invalid("singular input Hessian in receding-horizon solve")
        })?;
        let k_gain = huu_inv * (b.transpose() * p_bar * a);
        let d_gain = huu_inv * (b.transpose() * q_bar);
        let f = a - b * k_gain;
        p_mat = a.transpose() * p_bar * f;
        p_mat = 0.5 * (p_mat + p_mat.transpose());
        q_vec = f.transpose() * q_bar;
        gains.push((k_gain, d_gain));
    }
    gains.reverse();

    // Forward rollout of the feedback policy with clamping.
    let mut inputs = Vec::with_capacity(h);
    let mut x = problem.x0;
    for (k_gain, d_gain) in &gains {
        let u = cfg.clamp(&(-(k_gain * x) - d_gain));
        x = a * x + b * u;
        inputs.push(u);
    }
    let mut best_cost = problem.cost(&inputs);

    // Keep the zero plan if it somehow beats the clamped rollout.
    let zero = vec![Vec4::zeros(); h];
    let zero_cost = problem.cost(&zero);
    if zero_cost < best_cost {
        inputs = zero;
        best_cost = zero_cost;
    }

    // Projected gradient refinement with backtracking line search.
    let mut step = 0.5;
    for _ in 0..50 {
        let states = problem.rollout(&inputs);
        let grad = problem.gradient(&inputs, &states);
        let mut improved = false;
        for _ in 0..40 {
            let candidate: Vec<Vec4> = inputs
                .iter()
                .zip(&grad)
                .map(|(u, g)| cfg.clamp(&(u - step * g)))
                .collect();
            let cost = problem.cost(&candidate);
            if cost < best_cost {
                let decrease = best_cost - cost;
                inputs = candidate;
                best_cost = cost;
                improved = decrease >= 1e-8;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }

    let states = problem.rollout(&inputs);
    let plan = Plan {
        inputs: inputs.iter().map(vec_to_input).collect(),
        states: states.iter().map(vec_to_state).collect(),
        cost: best_cost,
    };
    Ok((plan.inputs[0], plan))
}

/// Builds the horizon reference by marching along the path from the current
/// progress at the commanded speed (capped at `v_max`), then solves. A zero
/// commanded speed holds the current path point. The receding horizon
/// itself provides the forward smoothing a fixed carrot would; marching the
/// references from a lookahead-shifted point instead makes an LQ tracker
/// overspeed by roughly `K_p * lookahead / K_v`.
pub fn track_step(
    x0: &QuadState,
    path: &ReferencePath,
    progress: f64,
    commanded_speed: f64,
    cfg: &MpcConfig,
) -> Result<(ControlInput, Plan), Error> {
    let refs = build_path_references(path, progress, commanded_speed, cfg);
    solve_receding_horizon(x0, &refs, cfg)
}

/// Reference sequence for path tracking; also used by the closed-loop
/// simulator.
pub fn build_path_references(
    path: &ReferencePath,
    progress: f64,
    commanded_speed: f64,
    cfg: &MpcConfig,
) -> Vec<ReferencePoint> {
    let total = path.total_length();
    let v_eff = commanded_speed.min(cfg.v_max);
    (1..=cfg.horizon_steps)
        .map(|k| {
            if v_eff <= 0.0 {
                let s = progress.min(total);
                return ReferencePoint {
                    p: path.point_at(s),
                    v: Vec3::zeros(),
                    yaw: path.heading_at(s),
                };
            }
            let s = progress + v_eff * cfg.dt * k as f64;
            let clamped = s.min(total);
            let v = if s < total {
                v_eff * path.tangent_at(clamped)
            } else {
                Vec3::zeros()
            };
            ReferencePoint {
                p: path.point_at(clamped),
                v,
                yaw: path.heading_at(clamped),
            }
        })
        .collect()
}
