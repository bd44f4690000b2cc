//! Bayesian parameter inference for partially observed stopped Markov
//! processes.
//!
//! A stopped process starts in a set of initial states and is killed at the
//! first hitting time of a target set; only a function of the terminal
//! state is observed. This crate estimates the marginal likelihood of such
//! observations with multi-level sequential Monte Carlo, where resampling
//! triggers at nested population levels rather than at fixed times, and
//! embeds that estimator in particle MCMC samplers (PIMH, PMMH, and PMMH
//! with per-proposal level adaptation) for posterior inference over model
//! parameters.
//!
//! Two population-genetics models ship as test beds: the coalescent with
//! mutation and its extension with migration between sub-groups. Both are
//! small enough at desk scale to admit exact oracles, which the test suite
//! uses to verify the estimator and the samplers end to end.

// Index loops mirror the matrix notation throughout the model code.
#![allow(clippy::needless_range_loop)]

pub mod coalescent;
pub mod error;
pub mod migration;
pub mod model;
pub mod pmcmc;
pub mod rng;
pub mod smc;

mod statespace;

pub use error::{Error, Result};
pub use model::{
    validate_level_schedule, LevelSchedule, ParameterPoint, PathSegment, State,
    StoppedProcessModel, Trajectory,
};
pub use smc::{run_multilevel_smc, SmcResult};
