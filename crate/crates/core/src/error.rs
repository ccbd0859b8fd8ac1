use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CalibError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("rotation angle {angle} rad is within 1e-6 of pi; log map is ill-conditioned")]
    AngleNearPi { angle: f64 },

    #[error("pitch {pitch} rad is within 1e-6 of +/-pi/2 (gimbal lock)")]
    GimbalLock { pitch: f64 },

    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(String),

    #[error("requested {requested} points but only {available} available")]
    TooFewPoints { requested: usize, available: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CalibError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CalibError::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CalibError::Io {
            path: path.into(),
            source,
        }
    }
}
