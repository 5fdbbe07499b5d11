//! Run configuration: a single JSON document with blocks `vehicle`, `mpc`,
//! `weights`, `trajectory`, `network`, and `run`.
//!
//! The six top-level blocks are required; every field inside a block has a
//! default. Validation errors name the failing key path.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::channel::DelayModel;
use crate::dynamics::{VehicleParams, VehicleState, INPUT_DIM, STATE_DIM};
use crate::error::Error;
use crate::mpc::{MpcConfig, MpcWeights};
use crate::trajectory::{sample, TrajectorySpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    fn invalid(path: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.to_string(),
            message: message.into(),
        }
    }

    fn from_core(path: &str, err: Error) -> Self {
        let message = match err {
            Error::InvalidArgument(m) => m,
            other => other.to_string(),
        };
        ConfigError::invalid(path, message)
    }
}

/// A weight matrix in the config file: either a diagonal (list of entries)
/// or a full row-major matrix (list of rows).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn build<const D: usize>(&self, path: &str) -> Result<nalgebra::SMatrix<f64, D, D>, ConfigError> {
        match self {
            MatrixSpec::Diagonal(d) => {
                if d.len() != D {
                    return Err(ConfigError::invalid(
                        path,
                        format!("expected {D} diagonal entries, got {}", d.len()),
                    ));
                }
                let mut m = nalgebra::SMatrix::<f64, D, D>::zeros();
                for (i, v) in d.iter().enumerate() {
                    m[(i, i)] = *v;
                }
                Ok(m)
            }
            MatrixSpec::Full(rows) => {
                if rows.len() != D || rows.iter().any(|r| r.len() != D) {
                    return Err(ConfigError::invalid(
                        path,
                        format!("expected a {D}x{D} matrix"),
                    ));
                }
                let mut m = nalgebra::SMatrix::<f64, D, D>::zeros();
                for (i, row) in rows.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        m[(i, j)] = *v;
                    }
                }
                Ok(m)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSpec {
    pub q_x: MatrixSpec,
    pub q_u: MatrixSpec,
    pub q_du: MatrixSpec,
}

impl Default for WeightsSpec {
    fn default() -> Self {
        Self {
            q_x: MatrixSpec::Diagonal(vec![8.0, 8.0, 8.0, 1.5, 1.5, 1.5, 5.0, 5.0]),
            q_u: MatrixSpec::Diagonal(vec![2.0, 10.0, 10.0]),
            q_du: MatrixSpec::Diagonal(vec![3.0, 20.0, 20.0]),
        }
    }
}

impl WeightsSpec {
    pub fn build(&self) -> Result<MpcWeights, ConfigError> {
        let weights = MpcWeights {
            q_x: self.q_x.build::<STATE_DIM>("weights.q_x")?,
            q_u: self.q_u.build::<INPUT_DIM>("weights.q_u")?,
            q_du: self.q_du.build::<INPUT_DIM>("weights.q_du")?,
        };
        weights
            .validate()
            .map_err(|e| ConfigError::from_core("weights", e))?;
        Ok(weights)
    }
}

/// How the harness charges controller execution time into the delay chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExecTimeModel {
    /// Use the measured solve wall time (not reproducible across runs).
    Measured,
    /// Charge a fixed execution time per solve; keeps runs deterministic.
    Constant { value: f64 },
}

impl Default for ExecTimeModel {
    fn default() -> Self {
        ExecTimeModel::Constant { value: 0.0141 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub uplink: DelayModel,
    pub downlink: DelayModel,
    pub exec: ExecTimeModel,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStateSpec {
    pub p: [f64; 3],
    #[serde(default)]
    pub v: [f64; 3],
    #[serde(default)]
    pub phi: f64,
    #[serde(default)]
    pub theta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunBlock {
    pub seed: u64,
    /// Simulated run length, s. Must not exceed the trajectory duration.
    pub duration: f64,
    /// Euclidean error tolerance, m.
    pub tolerance: f64,
    /// Transient window excluded from tolerance accounting, s.
    pub transient: f64,
    /// Plant integration substeps per controller tick.
    pub plant_substeps: usize,
    /// Start state; defaults to rest at the trajectory's initial position.
    pub initial: Option<InitialStateSpec>,
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 60.0,
            tolerance: 0.68f64.sqrt(),
            transient: 3.0,
            plant_substeps: 1,
            initial: None,
        }
    }
}

/// The on-disk config document. All six blocks must be present.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub vehicle: VehicleParams,
    pub mpc: MpcConfig,
    pub weights: WeightsSpec,
    pub trajectory: TrajectorySpec,
    pub network: NetworkSpec,
    pub run: RunBlock,
}

/// A parsed, validated run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub vehicle: VehicleParams,
    pub mpc: MpcConfig,
    pub weights: MpcWeights,
    pub trajectory: TrajectorySpec,
    pub uplink: DelayModel,
    pub downlink: DelayModel,
    pub exec_model: ExecTimeModel,
    pub seed: u64,
    pub duration: f64,
    pub tolerance: f64,
    pub transient_s: f64,
    pub plant_substeps: usize,
    pub initial_state: Option<VehicleState>,
}

impl ConfigFile {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn build(&self) -> Result<RunConfig, ConfigError> {
        self.vehicle
            .validate()
            .map_err(|e| ConfigError::from_core("vehicle", e))?;
        self.mpc
            .validate()
            .map_err(|e| ConfigError::from_core("mpc", e))?;
        let weights = self.weights.build()?;
        self.trajectory
            .validate()
            .map_err(|e| ConfigError::from_core("trajectory", e))?;
        self.network
            .uplink
            .validate()
            .map_err(|e| ConfigError::from_core("network.uplink", e))?;
        self.network
            .downlink
            .validate()
            .map_err(|e| ConfigError::from_core("network.downlink", e))?;
        if let ExecTimeModel::Constant { value } = self.network.exec {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ConfigError::invalid(
                    "network.exec.value",
                    "must be finite and >= 0",
                ));
            }
        }

        let run = &self.run;
        if !(run.duration.is_finite() && run.duration > 0.0) {
            return Err(ConfigError::invalid("run.duration", "must be finite and > 0"));
        }
        if run.duration > self.trajectory.duration {
            return Err(ConfigError::invalid(
                "run.duration",
                format!(
                    "exceeds trajectory.duration ({} > {})",
                    run.duration, self.trajectory.duration
                ),
            ));
        }
        if !(run.tolerance.is_finite() && run.tolerance > 0.0) {
            return Err(ConfigError::invalid("run.tolerance", "must be finite and > 0"));
        }
        if !(run.transient.is_finite() && run.transient >= 0.0) {
            return Err(ConfigError::invalid(
                "run.transient",
                "must be finite and >= 0",
            ));
        }
        if run.plant_substeps == 0 {
            return Err(ConfigError::invalid("run.plant_substeps", "must be >= 1"));
        }

        let initial_state = match &run.initial {
            None => None,
            Some(init) => {
                let state = VehicleState::new(
                    Vector3::from(init.p),
                    Vector3::from(init.v),
                    init.phi,
                    init.theta,
                );
                if !state.is_finite() {
                    return Err(ConfigError::invalid("run.initial", "must be finite"));
                }
                if state.phi.abs() > std::f64::consts::PI || state.theta.abs() > std::f64::consts::PI
                {
                    return Err(ConfigError::invalid(
                        "run.initial",
                        "phi and theta must lie in [-pi, pi]",
                    ));
                }
                Some(state)
            }
        };

        Ok(RunConfig {
            vehicle: self.vehicle,
            mpc: self.mpc,
            weights,
            trajectory: self.trajectory,
            uplink: self.network.uplink,
            downlink: self.network.downlink,
            exec_model: self.network.exec,
            seed: run.seed,
            duration: run.duration,
            tolerance: run.tolerance,
            transient_s: run.transient,
            plant_substeps: run.plant_substeps,
            initial_state,
        })
    }
}

impl RunConfig {
    /// Parse and validate a JSON config document.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        ConfigFile::from_json_str(text)?.build()
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        ConfigFile::load(path)?.build()
    }

    /// The start state: the configured one, or rest at the trajectory's
    /// initial position.
    pub fn start_state(&self) -> crate::error::Result<VehicleState> {
        match self.initial_state {
            Some(s) => Ok(s),
            None => Ok(VehicleState::at_rest(sample(&self.trajectory, 0.0)?.state.p)),
        }
    }
}

/// Mix a run-level seed, a stream id, and a model-level seed into one
/// channel seed (splitmix64 finalizer).
pub fn derive_stream_seed(run_seed: u64, stream: u64, model_seed: u64) -> u64 {
    let mut z = run_seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) ^ model_seed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TrajectoryKind;

    fn minimal_json() -> String {
        r#"{
            "vehicle": {},
            "mpc": {},
            "weights": {},
            "trajectory": {},
            "network": {},
            "run": {}
        }"#
        .to_string()
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let config = RunConfig::from_json_str(&minimal_json()).unwrap();
        assert_eq!(config.vehicle.gravity, 9.81);
        assert_eq!(config.mpc.horizon, 40);
        assert_eq!(config.trajectory.kind, TrajectoryKind::Circular);
        assert!((config.tolerance - 0.68f64.sqrt()).abs() < 1e-15);
        assert_eq!(config.exec_model, ExecTimeModel::Constant { value: 0.0141 });
    }

    #[test]
    fn missing_block_is_named() {
        let text = r#"{ "vehicle": {}, "weights": {}, "trajectory": {}, "network": {}, "run": {} }"#;
        let err = RunConfig::from_json_str(text).unwrap_err();
        assert!(err.to_string().contains("mpc"), "error was: {err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let text = minimal_json().replace("\"mpc\": {}", "\"mpc\": {\"horizn\": 40}");
        let err = RunConfig::from_json_str(&text).unwrap_err();
        assert!(err.to_string().contains("horizn"), "error was: {err}");
    }

    #[test]
    fn invalid_value_names_key_path() {
        let text = minimal_json().replace("\"run\": {}", "\"run\": {\"duration\": -3.0}");
        let err = RunConfig::from_json_str(&text).unwrap_err();
        assert!(err.to_string().starts_with("run.duration"), "error was: {err}");
    }

    #[test]
    fn run_longer_than_trajectory_rejected() {
        let text = minimal_json().replace("\"run\": {}", "\"run\": {\"duration\": 61.0}");
        let err = RunConfig::from_json_str(&text).unwrap_err();
        assert!(err.to_string().contains("trajectory.duration"), "error was: {err}");
    }

    #[test]
    fn full_weight_matrices_accepted_and_checked() {
        let good = minimal_json().replace(
            "\"weights\": {}",
            r#""weights": {"q_u": [[2.0, 0.5, 0.0], [0.5, 10.0, 0.0], [0.0, 0.0, 10.0]]}"#,
        );
        assert!(RunConfig::from_json_str(&good).is_ok());

        let asym = minimal_json().replace(
            "\"weights\": {}",
            r#""weights": {"q_u": [[2.0, 0.5, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]]}"#,
        );
        let err = RunConfig::from_json_str(&asym).unwrap_err();
        assert!(err.to_string().contains("symmetric"), "error was: {err}");

        let wrong_dim = minimal_json().replace(
            "\"weights\": {}",
            r#""weights": {"q_x": [1.0, 2.0]}"#,
        );
        let err = RunConfig::from_json_str(&wrong_dim).unwrap_err();
        assert!(err.to_string().starts_with("weights.q_x"), "error was: {err}");
    }

    #[test]
    fn initial_state_block() {
        let text = minimal_json().replace(
            "\"run\": {}",
            r#""run": {"initial": {"p": [1.0, 2.0, 3.0], "v": [0.1, 0.0, 0.0]}}"#,
        );
        let config = RunConfig::from_json_str(&text).unwrap();
        let s = config.initial_state.unwrap();
        assert_eq!(s.p, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(s.v, Vector3::new(0.1, 0.0, 0.0));
        assert_eq!(s.phi, 0.0);
    }

    #[test]
    fn stream_seeds_differ_per_stream_and_run_seed() {
        let a = derive_stream_seed(1, 1, 0);
        let b = derive_stream_seed(1, 2, 0);
        let c = derive_stream_seed(2, 1, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_stream_seed(1, 1, 0));
    }
}
