//! Wire protocol for closing the loop across two processes.
//!
//! Frames are a 4-byte big-endian length prefix followed by a UTF-8 JSON
//! object carrying a `type` field. A session is one TCP connection: the
//! plant side opens with `hello`, the edge answers `hello_ack` (or `error`
//! on a version mismatch), then every `state` message is answered by exactly
//! one `command` echoing its sequence number.

mod client;
mod codec;
mod server;

pub use client::{fly, FlyOptions};
pub use codec::{encode, FrameDecoder, MAX_FRAME_LEN};
pub use server::{EdgeServer, SessionStats};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dynamics::{INPUT_DIM, STATE_DIM};
use crate::trajectory::TrajectorySpec;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("protocol version mismatch: ours {ours}, theirs {theirs}")]
    VersionMismatch { ours: u32, theirs: u32 },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("frame length {len} exceeds the {max} byte cap")]
    FrameTooLarge { len: usize, max: usize },
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error("peer error [{code}]: {message}")]
    Remote { code: String, message: String },
    #[error("connection closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] crate::error::Error),
}

/// Controller settings echoed in the handshake so both ends can spot a
/// configuration skew.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcSummary {
    pub horizon: usize,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    pub mpc: MpcSummary,
    pub trajectory: TrajectorySpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelloAck {
    pub protocol_version: u32,
}

/// Plant state sample heading to the edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    pub seq: u64,
    /// Plant clock at emission, s.
    pub t_plant: f64,
    /// State in canonical order `[p, v, phi, theta]`.
    pub x: [f64; STATE_DIM],
    /// Desired states over the horizon; when absent the edge samples its
    /// own copy of the trajectory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_window: Option<Vec<[f64; STATE_DIM]>>,
}

/// Command answering one state sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandMsg {
    /// Echoes the `StateMsg` this command answers.
    pub seq: u64,
    pub t_plant_echo: f64,
    /// Edge clock when processing started / finished, s.
    pub t_edge_in: f64,
    pub t_edge_out: f64,
    pub u: [f64; INPUT_DIM],
    /// The solver diverged; `u` is the previous safe input.
    #[serde(default)]
    pub solver_error: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(Hello),
    HelloAck(HelloAck),
    State(StateMsg),
    Command(CommandMsg),
    Error(ErrorMsg),
}

pub(crate) const VERSION_MISMATCH_CODE: &str = "version_mismatch";

/// Wall clock with a monotonic backbone: anchored to the system clock once,
/// then advanced by a monotonic timer. Same-host sessions get comparable,
/// nondecreasing stamps.
#[derive(Clone, Copy, Debug)]
pub(crate) struct WallClock {
    anchor: f64,
    started: Instant,
}

impl WallClock {
    pub fn start() -> Self {
        let anchor = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .expect("system clock before unix epoch")
            .as_secs_f64();
        Self {
            anchor,
            started: Instant::now(),
        }
    }

    pub fn now(&self) -> f64 {
        self.anchor + self.started.elapsed().as_secs_f64()
    }
}
