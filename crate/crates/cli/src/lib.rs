//! Command-line pipeline for gpframe: config parsing, the model document,
//! and the fit / predict / eval / diagnose / synth / baseline stages.

pub mod config;
mod error;
pub mod model;
pub mod pipeline;

pub use config::PipelineConfig;
pub use error::CliError;
pub use model::{Fitted, ModelDocument};
