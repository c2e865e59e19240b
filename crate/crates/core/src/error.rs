use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the quantization toolchain.
#[derive(Debug, Error)]
pub enum CimError {
    /// Two shapes that must agree do not.
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: String,
        expected: usize,
        actual: usize,
    },

    /// A tensor or model was constructed in a way that violates its invariants.
    #[error("invalid shape: {0}")]
    Shape(String),

    /// A caller-supplied argument is out of its legal range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A non-finite value appeared during evaluation.
    #[error("non-finite value at layer {layer} ({context})")]
    Numeric { layer: usize, context: String },

    /// A strip's sensitivity computation failed.
    #[error("strip {strip}: {source}")]
    Strip {
        strip: String,
        #[source]
        source: Box<CimError>,
    },

    /// A malformed tensor file.
    #[error("{path}: format error at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Integer accumulation left the 32-bit accumulator range.
    #[error("accumulator overflow in layer {layer}, tile {tile}: {detail}")]
    Overflow {
        layer: usize,
        tile: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl CimError {
    pub fn dim(axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        CimError::Dimension {
            axis: axis.into(),
            expected,
            actual,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CimError::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error stems from arithmetic rather than from inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            CimError::Numeric { .. } | CimError::Overflow { .. } => true,
            CimError::Strip { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, CimError>;
