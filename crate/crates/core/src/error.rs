//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A level schedule violates one of its structural rules.
    #[error("invalid level schedule: {0}")]
    InvalidSchedule(String),

    /// A parameter point or model configuration is out of its domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A model could not be constructed (bad data vector, no stationary
    /// distribution, dimension mismatch).
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Resampling was requested from an all-zero weight vector.
    #[error("cannot resample from all-zero weights")]
    DegenerateWeights,

    /// A backward proposal was requested from a state with no valid
    /// predecessor.
    #[error("no valid predecessor from state {0:?}")]
    DegenerateProposal(Vec<u32>),

    /// Particle or ancestor index out of range.
    #[error("index {index} out of range for {len} particles")]
    IndexOutOfRange { index: usize, len: usize },

    /// A path was requested from a failed SMC run.
    #[error("SMC run failed (all weights zero at some level); no path available")]
    SmcFailed,

    /// Chain initialization exhausted its retry budget.
    #[error("chain initialization failed after {attempts} attempts")]
    InitializationFailed { attempts: usize },

    /// An exact oracle was asked for a state space beyond its size guard.
    #[error("state space too large for exact computation: {states} states (limit {limit})")]
    StateSpaceTooLarge { states: usize, limit: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
