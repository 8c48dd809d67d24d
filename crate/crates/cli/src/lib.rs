//! Experiment driver: configuration, the `run`/`report`/`gradcheck`/
//! `gen-data` commands and the SVG/table report.

pub mod config;
pub mod error;
pub mod report;
pub mod run;
pub mod tools;

pub use config::ExperimentConfig;
pub use error::CliError;
