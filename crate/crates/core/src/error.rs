use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the stitching library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate quad: {0}")]
    DegenerateQuad(String),

    #[error("point maps to infinity: {0}")]
    PointAtInfinity(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("canvas mismatch: {0}")]
    CanvasMismatch(String),

    #[error("image is empty")]
    EmptyImage,

    #[error("image too small: {0}")]
    ImageTooSmall(String),

    #[error("insufficient matches: {found} confident cells, need {needed}")]
    InsufficientMatches { found: usize, needed: usize },

    #[error("no consensus: best inlier ratio {ratio:.3} below {threshold}")]
    NoConsensus { ratio: f64, threshold: f64 },

    #[error("objective is not finite: {0}")]
    NonFiniteObjective(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("folded mesh: {0}")]
    FoldedMesh(String),

    #[error("zero-length edge in mesh at {0}")]
    ZeroLengthEdge(String),

    #[error("overlap region is empty")]
    EmptyOverlap,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("{path}: invalid data: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io { path: path.into(), message: err.to_string() }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// Short machine-parsable category, used by the CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateQuad(_) => "degenerate-quad",
            Error::PointAtInfinity(_) => "point-at-infinity",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::CanvasMismatch(_) => "canvas-mismatch",
            Error::EmptyImage => "empty-image",
            Error::ImageTooSmall(_) => "image-too-small",
            Error::InsufficientMatches { .. } => "insufficient-matches",
            Error::NoConsensus { .. } => "no-consensus",
            Error::NonFiniteObjective(_) => "non-finite-objective",
            Error::SingularSystem(_) => "singular-system",
            Error::FoldedMesh(_) => "folded-mesh",
            Error::ZeroLengthEdge(_) => "zero-length-edge",
            Error::EmptyOverlap => "empty-overlap",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Format { .. } => "io",
        }
    }
}

impl Error {
    /// Process exit status for this error: 2 for matching failures, 3 for
    /// unreadable or unwritable files, 4 for configuration and degenerate
    /// geometry.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InsufficientMatches { .. } | Error::NoConsensus { .. } => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
