//! Library surface of the experiment runner: config schema and command
//! implementations, exposed for integration tests and fuzzing.

pub mod commands;
pub mod config;

pub use commands::{cmd_generate, cmd_grid, cmd_mds, cmd_train, CliError, Overrides};
pub use config::ExperimentConfig;
