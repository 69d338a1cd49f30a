//! Cooperative multi-robot visual-inertial odometry with point and line
//! features.
//!
//! Each robot runs a sliding-window filter over its own inertial readings and
//! camera tracks of point and line features, and additionally fuses
//! constraints from features commonly observed by neighboring robots through
//! a covariance-intersection update, which keeps the fused estimate
//! consistent without tracking cross-robot correlations.
//!
//! The crate is organized as a library plus a small benchmark CLI:
//!
//! - [`geom`] — JPL quaternions, rotations, Plücker and closest-point lines
//! - [`state`] — per-robot state vector, cloning, marginalization
//! - [`propagate`] — IMU mean/covariance propagation
//! - [`meas`] — point/line measurement models, Jacobians, triangulation
//! - [`msckf`] — per-robot sliding-window update with nullspace projection
//! - [`coop`] — common-feature covariance-intersection update
//! - [`sim`] — deterministic multi-robot world and measurement synthesis
//! - [`filter`] — per-frame filter orchestration for one robot
//! - [`bench`] — Monte-Carlo campaigns, metrics, report emission, CLI
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod bench;
pub mod coop;
pub mod error;
pub mod filter;
pub mod geom;
pub mod meas;
pub mod msckf;
pub mod propagate;
pub mod sim;
pub mod state;

pub use error::{Error, Result};
