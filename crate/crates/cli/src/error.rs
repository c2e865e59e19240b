use std::path::PathBuf;

use cimq_core::CimError;
use thiserror::Error;

use crate::stages::Stage;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    /// The config or one of the inputs it references is unusable.
    #[error("config error: {path}: {message}")]
    Config { path: PathBuf, message: String },

    /// A stage needs an artifact that an upstream stage has not produced.
    #[error("stage {stage}: missing {path} (run stage {upstream} first)")]
    MissingArtifact {
        stage: Stage,
        upstream: Stage,
        path: PathBuf,
    },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: CimError,
    },

    /// An artifact exists but does not agree with what the stage recomputed.
    #[error("stage {stage}: {path}: {message}")]
    Inconsistent {
        stage: Stage,
        path: PathBuf,
        message: String,
    },
}

impl CliError {
    pub fn config(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Stage { source, .. } if source.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_STAGE,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Attaches the running stage to core errors.
pub(crate) trait InStage<T> {
    fn in_stage(self, stage: Stage) -> Result<T>;
}

impl<T> InStage<T> for std::result::Result<T, CimError> {
    fn in_stage(self, stage: Stage) -> Result<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
