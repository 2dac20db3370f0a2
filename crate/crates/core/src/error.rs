use std::time::Duration;

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid group: {0}")]
    InvalidGroup(String),

    #[error("protocol error in {op} on group {group}: {reason}")]
    Protocol {
        op: &'static str,
        group: usize,
        reason: String,
    },

    #[error("collective on group {group} timed out after {waited:?} ({arrived}/{expected} members arrived)")]
    Timeout {
        group: usize,
        waited: Duration,
        arrived: usize,
        expected: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing state: {0}")]
    MissingState(String),

    #[error("rank worker panicked: {0}")]
    Worker(String),

    #[error("export failed: {0}")]
    Export(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
