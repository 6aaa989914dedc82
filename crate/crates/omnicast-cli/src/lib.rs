//! Experiment harness around the `omnicast` forecaster: JSON configs,
//! outcome environments, and the artifacts each subcommand writes.

pub mod config;
pub mod env;
pub mod run;

pub use config::ExperimentConfig;
