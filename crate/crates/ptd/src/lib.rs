//! File formats, checkpoints, the training pipeline and the `ptd` command
//! line around `ptd-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod demo;
pub mod error;
pub mod io;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use pipeline::{run_training, Models, Report};
