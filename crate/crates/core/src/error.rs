use std::path::PathBuf;

use thiserror::Error;

use crate::fleet::{Processor, Tier};

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("fleet must contain at least one device")]
    EmptyFleet,

    #[error("tier {tier} has {available} devices but {needed} are required")]
    InsufficientDevices {
        tier: Tier,
        needed: usize,
        available: usize,
    },

    #[error("{processor} step {step} does not exist (device has {available} steps)")]
    UnknownStep {
        processor: Processor,
        step: usize,
        available: usize,
    },

    #[error("execution record targets {actual} but the {expected} power model was requested")]
    WrongTarget { expected: Processor, actual: Processor },

    #[error("radio table has no entry for signal level {0:?}")]
    UnknownSignal(crate::variance::SignalLevel),

    #[error("effective throughput is zero")]
    ZeroThroughput,

    #[error("energy must be positive to compute performance-per-watt")]
    ZeroEnergy,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged: non-finite loss")]
    NonFiniteLoss,

    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("malformed input in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        SimError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn precondition(message: impl Into<String>) -> Self {
        SimError::Precondition(message.into())
    }

    /// True for errors caused by the experiment configuration.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            SimError::Config { .. } | SimError::EmptyFleet | SimError::InsufficientDevices { .. }
        )
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
