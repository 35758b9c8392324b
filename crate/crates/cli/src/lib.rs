//! Pipelines behind the `quadmech` binary: pretraining, private
//! fine-tuning sweeps, audits and SVG reports.

pub mod audit_cmd;
pub mod config;
pub mod data;
pub mod error;
pub mod manifest;
pub mod report;
pub mod results;
pub mod run;

pub use error::{CliError, Result};
