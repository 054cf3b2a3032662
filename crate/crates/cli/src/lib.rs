//! Entry points behind the `granu` binary: dataset generation, training,
//! evaluation, the matching-strategy ablation and the inference service.

pub mod cli;
pub mod commands;
pub mod error;
pub mod server;

pub use error::{CliError, CliResult};
