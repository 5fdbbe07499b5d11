//! Desk-scale testbed that closes a quadrotor control loop over a
//! delay-injecting link, with the model predictive controller running in a
//! separate edge process.
//!
//! - [`dynamics`]: the kinematic vehicle model and its Euler integrator
//! - [`mpc`]: horizon rollout, quadratic tracking cost, analytic gradient,
//!   and the projected-gradient solver
//! - [`trajectory`]: circular, spiral, helical, and hover references
//! - [`channel`]: seeded delay channels and the d1/d2/d3 ledger
//! - [`protocol`]: length-prefixed JSON wire protocol, edge server, and the
//!   real-time plant client
//! - [`harness`]: the deterministic simulated-clock closed loop
//! - [`report`]: per-step logs, summaries, CSV/JSON export
//! - [`config`]: the JSON run configuration

pub mod channel;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod mpc;
pub mod protocol;
pub mod report;
pub mod trajectory;

pub use config::{ConfigError, RunConfig};
pub use dynamics::{ControlInput, VehicleParams, VehicleState};
pub use error::{Error, Result};
pub use harness::{euclidean_error, run_closed_loop};
pub use mpc::{MpcConfig, MpcController, MpcReference, MpcSolution, MpcWeights};
pub use report::{RunReport, RunSummary};
pub use trajectory::{TrajectoryKind, TrajectorySpec};
