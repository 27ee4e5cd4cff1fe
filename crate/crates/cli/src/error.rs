use std::path::{Path, PathBuf};

use refdiff_core::io::NgvError;
use refdiff_core::metrics::MetricError;
use refdiff_core::nn::{CheckpointError, NetError, TrainError};
use refdiff_core::phantom::PhantomError;
use refdiff_core::refinement::RefinementError;
use refdiff_core::schedule::ScheduleError;
use refdiff_core::{EngineError, GridError};
use thiserror::Error;

/// Pipeline failure, grouped by what the user has to fix.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments.
    #[error("config error: {0}")]
    Config(String),
    /// Missing, corrupt or inconsistent inputs.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values or degenerate statistics.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io { .. } => 5,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::NonFinite(_) => CliError::Numeric(e.to_string()),
            GridError::BadPercentiles { .. } | GridError::BadSpacing(..) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::NonFinite(_) => CliError::Numeric(e.to_string()),
            EngineError::Grid(g) => g.into(),
            EngineError::Schedule(s) => s.into(),
            EngineError::Denoiser(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<RefinementError> for CliError {
    fn from(e: RefinementError) -> Self {
        match e {
            RefinementError::Engine(e) => e.into(),
            RefinementError::Grid(g) => g.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<NgvError> for CliError {
    fn from(e: NgvError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::NonFinite | MetricError::ZeroVariance => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Grid(g) => g.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
