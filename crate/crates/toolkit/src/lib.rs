//! Command-line plumbing around `cmaae-core`: run configuration, dataset
//! folder layouts, PNG input and output, and the `generate`, `train`,
//! `infer` and `eval` commands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use config::{Ablation, Overrides, RunConfig};
pub use error::{Result, ToolkitError};
