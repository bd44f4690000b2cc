//! Library half of the experiment runner: configuration, run dispatch,
//! trace export, and chain diagnostics. The `mlpmcmc` binary is a thin
//! argument-parsing shell over these modules.

#![allow(clippy::needless_range_loop)]

use std::fmt;

pub mod config;
pub mod diag;
pub mod runner;
pub mod trace;

/// Errors split by exit code: validation problems (bad flags, bad config)
/// exit with 1, runtime failures (model errors mid-run, IO) with 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Validation(msg) => write!(f, "{msg}"),
            Self::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}
