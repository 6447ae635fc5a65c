//! Command implementations behind the `microtopt` binary.

pub mod commands;
pub mod config;
pub mod density;
pub mod error;
pub mod export;

pub use config::RunConfig;
pub use density::DensityField;
pub use error::CliError;
