use thiserror::Error;

/// Errors produced by the plant, controller, channel, and harness layers.
///
/// Protocol and configuration handling have their own error types
/// ([`crate::protocol::ProtocolError`], [`crate::config::ConfigError`])
/// because they carry extra context (session state, failing key path).
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition (non-finite value,
    /// dimension mismatch, out-of-range time, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The MPC solver hit a non-finite cost. Carries the number of
    /// iterations completed before the blow-up.
    #[error("solver diverged after {iterations} iterations")]
    SolverDiverged { iterations: usize },

    /// Send on a channel that has been closed.
    #[error("channel closed")]
    ChannelClosed,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
