//! Command-line harness for transformational sparse coding: training runs,
//! comparisons against a fixed-magnitude sparse-coding baseline, degree of
//! freedom reports, feature grids and error-surface sweeps.

pub mod commands;
pub mod config;
pub mod error;
pub mod grid;
pub mod report;
pub mod sweep;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
