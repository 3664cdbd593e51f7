//! Experiment orchestration for `fp-bandits`: configs, seeded parallel runs,
//! aggregation, CSV output and the command line.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod output;
pub mod presets;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use experiment::{run_experiment, AggregateResult, ExperimentResult, PolicyAggregate};
