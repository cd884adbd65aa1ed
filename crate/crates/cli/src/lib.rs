//! The `eusml` pipeline: configuration, stage manifests and the stage
//! commands behind the binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod stage;

pub use error::{CliError, Result};
