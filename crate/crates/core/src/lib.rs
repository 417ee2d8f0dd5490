//! Deterministic drone-racing simulation and state-estimation stack.
//!
//! A race track is a coarse, ordered set of upright gates. At runtime a
//! perception source reports the closest visible gate's relative pose in
//! spherical coordinates together with a self-reported variance. Per-gate
//! extended Kalman filters fuse those measurements in the (drifting) odometry
//! frame, waypoints are regenerated from the filtered map every control tick,
//! and a receding-horizon controller tracks the interpolated path. A
//! benchmark harness sweeps commanded speed and track perturbation and scores
//! episodes by the fraction of gates passed over three consecutive laps.
//!
//! Modules mirror the pipeline: [`geometry`] (frames and the polar/Cartesian
//! conversion), [`perception`] (synthetic measurement source), [`mapping`]
//! (per-gate EKFs and traversal tracking), [`planning`] (waypoints and carrot
//! references), [`control`] (receding-horizon tracker), [`sim`] (ground-truth
//! world, drift, scoring), and [`bench`] (track files, sweeps, result
//! tables).

pub mod bench;
pub mod control;
pub mod error;
pub mod geometry;
pub mod mapping;
pub mod perception;
pub mod planning;
pub mod sim;

pub use error::Error;
