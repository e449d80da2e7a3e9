//! Experiment runner for the imitation-learning library: config parsing,
//! the experiment drivers and the categorized CLI errors.

pub mod config;
pub mod error;
pub mod experiments;

pub use config::{ExperimentConfig, Method};
pub use error::CliError;
