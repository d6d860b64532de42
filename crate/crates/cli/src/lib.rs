//! Experiment runner: config files, training runs, sweeps and method
//! comparisons with CSV and JSON output.

pub mod commands;
pub mod config;

pub use commands::{cmd_compare, cmd_run, cmd_sweep, CliError};
pub use config::{ConfigBuilder, ConfigError, ExperimentConfig};
