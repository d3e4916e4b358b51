//! File formats, checkpoints, metrics and the command-line driver around
//! [`semidpo_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod parallel;

pub use error::{CliError, CliResult};

/// Stamped into every artifact.
pub const TOOL: &str = concat!("semidpo ", env!("CARGO_PKG_VERSION"));
