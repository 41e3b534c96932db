//! File formats, experiment configuration and the `reina-lab` command line
//! around the `reina-core` algorithms.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod parallel;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
