//! Configuration, experiment runners and output writers behind the `fedrs`
//! binary.

pub mod config;
pub mod experiment;
pub mod output;
pub mod replay;

pub use config::{ConfigError, ExperimentConfig};
pub use experiment::{run_experiment, ExperimentError, ExperimentOutput};
