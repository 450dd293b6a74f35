//! Experiment driver for `fbsde-core`: TOML configs in, CSV tables,
//! checkpoints and reproducibility manifests out.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod problem;

pub use commands::Invocation;
pub use config::RunConfig;
pub use error::CliError;
pub use problem::AnyProblem;
