//! Waypoint generation from the gate map, the piecewise-linear reference
//! path, carrot sampling for the controller, and the reactive line-of-sight
//! baseline planner.
//!
//! Every gate contributes two waypoints offset by `+-gate_offset` along the
//! gate-frame x axis: one in front of the gate relative to the approaching
//! vehicle and one behind it. Waypoints are regenerated from the latest map
//! every control tick; the only planner state is the arc-length progress
//! along the current path.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{gate_frame_coords, wrap_angle, PolarMeasurement, Vec3};
use crate::mapping::{BodyPoseEstimate, TrackMap};

/// Which side of the gate plane a waypoint sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaypointSide {
    Front,
    Back,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub p: Vec3,
    pub gate: usize,
    pub side: WaypointSide,
}

/// Planner knobs exposed in the track file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Waypoint offset along the gate normal, meters (`x_G`).
    pub gate_offset: f64,
    /// Lower bound on the carrot lookahead, meters.
    pub min_lookahead: f64,
    /// Lookahead horizon in seconds of travel at the commanded speed.
    pub lookahead_time: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            gate_offset: 0.8,
            min_lookahead: 0.5,
            lookahead_time: 0.6,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.gate_offset <= 0.0 {
            return Err(Error::config("planner.gate_offset", "must be positive"));
        }
        if self.min_lookahead <= 0.0 || self.lookahead_time < 0.0 {
            return Err(Error::config("planner.min_lookahead", "must be positive"));
        }
        Ok(())
    }

    /// Carrot lookahead distance for a commanded speed. Zero commanded speed
    /// means hold position, so the lookahead collapses to zero.
    pub fn lookahead(&self, speed: f64) -> f64 {
        if speed <= 0.0 {
            0.0
        } else {
            self.min_lookahead.max(self.lookahead_time * speed)
        }
    }
}

/// Two waypoints per gate for one full lap starting at the next gate.
///
/// The front waypoint of the next gate lies on the side of the gate plane
/// the vehicle currently occupies; for subsequent gates the previous gate's
/// position decides which side counts as front. Waypoints are ordered
/// front-then-back per gate.
pub fn generate_waypoints(
    map: &TrackMap,
    gate_offset: f64,
    quad_pos: &Vec3,
) -> Result<Vec<Waypoint>, Error> {
    if gate_offset <= 0.0 {
        return Err(Error::invalid("waypoint gate offset must be positive"));
    }
    let n = map.num_gates();
    let mut waypoints = Vec::with_capacity(2 * n);
    for k in 0..n {
        let idx = (map.next_gate + k) % n;
        let pose = map.beliefs[idx].pose();
        let reference = if k == 0 {
            *quad_pos
        } else {
            map.beliefs[(map.next_gate + k - 1) % n].position()
        };
        let approach_x = gate_frame_coords(&reference, &pose).x;
        let front_sign = if approach_x > 0.0 { 1.0 } else { -1.0 };
        let offset = pose.rotation() * Vec3::new(gate_offset, 0.0, 0.0);
        waypoints.push(Waypoint {
            p: pose.t + front_sign * offset,
            gate: idx,
            side: WaypointSide::Front,
        });
        waypoints.push(Waypoint {
            p: pose.t - front_sign * offset,
            gate: idx,
            side: WaypointSide::Back,
        });
    }
    Ok(waypoints)
}

/// Piecewise-linear path with an exact arc-length table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePath {
    points: Vec<Vec3>,
    cumulative: Vec<f64>,
}

impl ReferencePath {
    /// Builds a path from ordered points, merging consecutive duplicates.
    /// Needs at least two distinct points.
    pub fn new(points: impl IntoIterator<Item = Vec3>) -> Result<Self, Error> {
        let mut merged: Vec<Vec3> = Vec::new();
        for p in points {
            if merged.last().is_none_or(|last| (p - last).norm() > 1e-9) {
                merged.push(p);
            }
        }
        if merged.len() < 2 {
            return Err(Error::invalid(
                "reference path needs at least 2 distinct waypoints",
            ));
        }
        let mut cumulative = Vec::with_capacity(merged.len());
        let mut total = 0.0;
        cumulative.push(0.0);
        for w in merged.windows(2) {
            total += (w[1] - w[0]).norm();
            cumulative.push(total);
        }
        Ok(Self { points: merged, cumulative })
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Index of the segment containing arc length `s` (clamped to the path).
    fn segment_at(&self, s: f64) -> usize {
        let s = s.clamp(0.0, self.total_length());
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i - 1,
        }
    }

    /// Point at arc length `s`, clamped to the path ends.
    pub fn point_at(&self, s: f64) -> Vec3 {
        let s = s.clamp(0.0, self.total_length());
        let i = self.segment_at(s);
        let seg_len = self.cumulative[i + 1] - self.cumulative[i];
        let t = (s - self.cumulative[i]) / seg_len;
        self.points[i] + t * (self.points[i + 1] - self.points[i])
    }

    /// Unit tangent of the segment containing `s`.
    pub fn tangent_at(&self, s: f64) -> Vec3 {
        let i = self.segment_at(s.clamp(0.0, self.total_length()));
        (self.points[i + 1] - self.points[i]).normalize()
    }

    /// Heading (world yaw) of the segment containing `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let t = self.tangent_at(s);
        t.y.atan2(t.x)
    }

    /// Arc length of the point closest to `p` among path points with arc
    /// length in `[lo, hi]`.
    pub fn project(&self, p: &Vec3, lo: f64, hi: f64) -> f64 {
        let lo = lo.clamp(0.0, self.total_length());
        let hi = hi.clamp(lo, self.total_length());
        let mut best_s = lo;
        let mut best_d = f64::INFINITY;
        for i in 0..self.points.len() - 1 {
            let (s0, s1) = (self.cumulative[i], self.cumulative[i + 1]);
            if s1 < lo || s0 > hi {
                continue;
            }
            let a = self.points[i];
            let dir = self.points[i + 1] - a;
            let seg_len = s1 - s0;
            // Parameter of the orthogonal projection, clamped to the part of
            // the segment inside the window.
            let t_lo = ((lo - s0) / seg_len).clamp(0.0, 1.0);
            let t_hi = ((hi - s0) / seg_len).clamp(0.0, 1.0);
            let t = ((p - a).dot(&dir) / dir.norm_squared()).clamp(t_lo, t_hi);
            let d = (p - (a + t * dir)).norm();
            if d < best_d {
                best_d = d;
                best_s = s0 + t * seg_len;
            }
        }
        best_s
    }
}

/// Interpolated path through the waypoint list.
pub fn build_reference_path(waypoints: &[Waypoint]) -> Result<ReferencePath, Error> {
    ReferencePath::new(waypoints.iter().map(|w| w.p))
}

/// Carrot reference: the path point `lookahead` meters ahead of the current
/// progress (clamped to the path end) and the heading of its segment.
pub fn sample_carrot(path: &ReferencePath, progress: f64, lookahead: f64) -> (Vec3, f64) {
    assert!(lookahead > 0.0, "lookahead must be positive");
    let s = (progress + lookahead).min(path.total_length());
    (path.point_at(s), path.heading_at(s))
}

/// Arc-length progress tracker. Progress is the projection of the vehicle
/// onto the path, forced to be monotonically non-decreasing while the next
/// gate stays the same; passing a gate starts a fresh projection on the
/// regenerated path.
#[derive(Debug, Clone)]
pub struct ProgressTracker {
    progress: f64,
    epoch: Option<usize>,
    /// Forward search window for the projection, meters.
    window: f64,
}

impl Default for ProgressTracker {
    fn default() -> Self {
        Self {
            progress: 0.0,
            epoch: None,
            window: 6.0,
        }
    }
}

impl ProgressTracker {
    /// Updates and returns the progress for the current tick.
    pub fn update(&mut self, next_gate: usize, path: &ReferencePath, pos: &Vec3) -> f64 {
        if self.epoch != Some(next_gate) {
            self.epoch = Some(next_gate);
            self.progress = path.project(pos, 0.0, self.window);
        } else {
            let lo = self.progress.min(path.total_length());
            let s = path.project(pos, lo, lo + self.window);
            self.progress = s.max(self.progress).min(path.total_length());
        }
        self.progress
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }
}

/// Per-episode planner state: regenerates waypoints from the latest map
/// every tick and anchors the reference path at the point where the current
/// gate-to-gate leg began, so the path always starts next to the vehicle.
///
/// Without the anchor, the instant a gate is passed the regenerated path
/// would begin at the next gate's front waypoint a full leg ahead, and the
/// tracking cost would command a surge toward it. After a traversal the
/// path also routes through the passed gate's back waypoint before turning
/// off, so the vehicle exits along the gate normal instead of cutting into
/// the next leg while still inside the frame.
#[derive(Debug, Clone)]
pub struct Planner {
    epoch: Option<usize>,
    anchor: Vec3,
    exit_through_prev: bool,
    tracker: ProgressTracker,
}

impl Default for Planner {
    fn default() -> Self {
        Self {
            epoch: None,
            anchor: Vec3::zeros(),
            exit_through_prev: false,
            tracker: ProgressTracker::default(),
        }
    }
}

impl Planner {
    /// Builds this tick's reference path and the vehicle's progress along
    /// it. The path runs from the epoch anchor (episode start, or the
    /// traversal point that started this epoch), through the passed gate's
    /// back waypoint when applicable, then one full lap of waypoints.
    pub fn plan(
        &mut self,
        map: &TrackMap,
        gate_offset: f64,
        quad_pos: &Vec3,
    ) -> Result<(ReferencePath, f64), Error> {
        let waypoints = generate_waypoints(map, gate_offset, quad_pos)?;
        if self.epoch != Some(map.next_gate) {
            self.anchor = *quad_pos;
            self.exit_through_prev = self.epoch.is_some();
            self.epoch = Some(map.next_gate);
        }
        // The previous gate is the last entry of the regenerated list; its
        // back waypoint is the exit point of the leg that just ended.
        let exit = self
            .exit_through_prev
            .then(|| waypoints.last().expect("nonempty waypoint list").p);
        let path = ReferencePath::new(
            std::iter::once(self.anchor)
                .chain(exit)
                .chain(waypoints.iter().map(|w| w.p)),
        )?;
        let progress = self.tracker.update(map.next_gate, &path, quad_pos);
        Ok((path, progress))
    }
}

/// Reactive baseline: the latest measured gate center, transformed into the
/// odometry frame, with yaw pointing at it; no map and no gate-yaw
/// compensation. Returns `None` when no gate is visible, in which case the
/// caller holds the last reference.
pub fn baseline_los_reference(
    latest_measurement: Option<&PolarMeasurement>,
    body: &BodyPoseEstimate,
) -> Option<(Vec3, f64)> {
    let m = latest_measurement?;
    let z = crate::geometry::CartesianMeasurement::from_polar(m);
    let (t_og, _) = crate::geometry::measurement_to_odometry(
        &z.translation(),
        z.yaw(),
        &body.rotation,
        &body.translation,
        body.yaw,
    );
    let to_gate = t_og - body.translation;
    let yaw = if to_gate.xy().norm() > 1e-9 {
        to_gate.y.atan2(to_gate.x)
    } else {
        body.yaw
    };
    Some((t_og, wrap_angle(yaw)))
}
