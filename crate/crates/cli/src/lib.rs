//! Experiment harness behind the `purge` binary: configuration, end-to-end
//! training, request processing, cost simulation and summary tables.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use error::{CliError, CliResult};
