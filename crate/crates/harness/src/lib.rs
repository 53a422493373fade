//! Experiment harness: configuration, orchestration, report files and the
//! `tesser` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::{ConfigMap, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, ExperimentReport};
