//! File formats, configuration, result records and command pipelines for
//! the `fsban` command line. The numerics live in [`fsban_core`].

pub use fsban_core as core;

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod results;

pub use config::{AnalysisConfig, ExperimentConfig};
pub use error::{CliError, CliResult};
