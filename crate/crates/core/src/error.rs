use std::path::PathBuf;

use crate::optimizer::OptimState;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("point lies behind the camera (z = {z:e})")]
    BehindCamera { z: f64 },
    #[error("sample coordinate ({u}, {v}) outside the {width}x{height} support")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("degenerate depth: mean inverse depth is not positive")]
    DegenerateDepth,
    #[error("empty sample: no valid photometric error pixels")]
    EmptySample,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad scene spec: {0}")]
    BadSpec(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("optimization diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        state: Box<OptimState>,
    },
    #[error("empty evaluation region")]
    EmptyRegion,
    #[error("trajectory too short: {len} poses for {snippet}-frame snippets")]
    TooShort { len: usize, snippet: usize },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::DegenerateDepth | Error::EmptySample
        )
    }
}
