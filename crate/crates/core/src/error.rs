use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// The keypoint configuration does not pin down a unique rotation
    /// (centered keypoints have rank < 2).
    #[error("degenerate keypoint configuration: {0}")]
    DegenerateConfiguration(String),

    /// Inputs to an optimization contained NaN or infinite values.
    #[error("non-finite value encountered in {0}")]
    NonFiniteObjective(&'static str),

    /// No point of the posed model projects inside the image.
    #[error("no point projects inside the image")]
    EmptyProjection,

    /// The detected mask has zero area.
    #[error("detected mask has zero area")]
    EmptyDetectedMask,

    /// A mask selects no valid pixel.
    #[error("mask selects no valid pixel")]
    EmptyMask,

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
