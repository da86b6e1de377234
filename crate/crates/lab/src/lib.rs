//! Experiment runner around `tta-core`: configuration files, report and model
//! formats, and the study drivers used by the `tta-lab` binary.

pub mod config;
pub mod error;
pub mod experiments;
pub mod export;
pub mod model_io;
pub mod report;

pub use config::{ExperimentConfig, Overrides};
pub use error::{LabError, Result};
pub use experiments::{Lab, MonotonicClock};
pub use report::Report;
