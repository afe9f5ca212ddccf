//! File formats, configuration, checkpoints and the experiment commands
//! built on `calm-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;

pub use config::ExperimentConfig;
pub use error::CliError;
