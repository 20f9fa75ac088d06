use thiserror::Error;

use crate::plane::Segmentation;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected_width}x{expected_height}, got {width}x{height}")]
    DimensionMismatch {
        expected_width: usize,
        expected_height: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),

    #[error("degenerate plane fit (condition number {condition:.3e})")]
    DegeneratePlane { condition: f64 },

    #[error("insufficient inlier weight: {total} < {required}")]
    InsufficientWeight { total: f64, required: f64 },

    #[error("no valid pixels")]
    NoValidPixels,

    #[error("ground segmentation did not converge after {} iterations", .last.iterations)]
    NonConvergence { last: Box<Segmentation> },

    #[error("optimization diverged at step {step}")]
    Divergence { step: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("trajectory too short: path length {path_length:.3} m is below every requested segment length")]
    TrajectoryTooShort { path_length: f64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by numerically degenerate data rather than bad
    /// arguments.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegeneratePlane { .. }
                | Error::InsufficientWeight { .. }
                | Error::NoValidPixels
                | Error::NonConvergence { .. }
                | Error::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
