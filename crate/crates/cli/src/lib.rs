//! Orchestration of reference-guided diffusion adaptation experiments:
//! configuration, the baseline / DA / DG / mixed arms, cached adaptation,
//! run manifests and the comparison report.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod sweep;

pub use config::{Arm, ExperimentConfig};
pub use error::{CliError, Result};
pub use pipeline::{ArmOutcome, Datasets, Experiment};
