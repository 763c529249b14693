use std::path::{Path, PathBuf};

use canopy_core::eval::EvalError;
use canopy_core::experiment::ExperimentError;
use canopy_core::infer::InferError;
use canopy_core::model::{CheckpointError, ModelError};
use canopy_core::preprocess::PreprocessError;
use canopy_core::raster::RasterError;
use canopy_core::train::TrainError;

/// Every failure a command can report, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {message}")]
    Numeric {
        message: String,
        dump: Option<PathBuf>,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
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
            CliError::Numeric { .. } => 3,
            CliError::Data(_) => 4,
            CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        match e {
            RasterError::Io { path, source } => CliError::Io {
                path: path.into(),
                source,
            },
            RasterError::Spec(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::NonFinite { .. } => CliError::Numeric {
                message: e.to_string(),
                dump: None,
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::UnknownSubset(_) | PreprocessError::BadFactor(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::NonFiniteGradient { .. } | TrainError::Diverged { .. } => {
                CliError::Numeric {
                    message: e.to_string(),
                    dump: None,
                }
            }
            TrainError::Model(m) => m.into(),
            TrainError::Preprocess(p) => p.into(),
            TrainError::Io(source) => CliError::Io {
                path: PathBuf::from("<loss curve>"),
                source,
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::Grid(_) => CliError::Config(e.to_string()),
            InferError::Tile { source, .. } if matches!(source, ModelError::NonFinite { .. }) => {
                source.into()
            }
            InferError::Preprocess(p) => p.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BadBinWidth(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Split(_) => CliError::Config(e.to_string()),
            ExperimentError::MissingBand { .. } => CliError::Data(e.to_string()),
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Infer(i) => i.into(),
            ExperimentError::Eval(v) => v.into(),
            ExperimentError::Model(m) => m.into(),
            ExperimentError::Preprocess(p) => p.into(),
        }
    }
}
