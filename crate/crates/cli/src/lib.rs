//! Configuration, run layout and reporting behind the `tasklab` command.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{ConfigError, ExperimentConfig, RUN_ROOT_ENV};
pub use error::{CliError, CliResult};
