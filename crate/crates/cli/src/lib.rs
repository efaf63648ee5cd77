//! Config-driven runner for the `sparkle-core` simulator.
//!
//! The `sparkle` binary wraps [`runner::cmd_run`], [`runner::cmd_sweep`] and
//! [`runner::cmd_verify`]; everything it does is reachable from here too.

pub mod config;
pub mod error;
pub mod experiment;
pub mod output;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{CliError, ConfigIssue};
pub use experiment::Experiment;
