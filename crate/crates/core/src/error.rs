use thiserror::Error;

/// Errors raised by the mask, fusion and bound routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): need finite coordinates with x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("mask dimensions must be nonzero, got {height}x{width}")]
    EmptyMask { height: usize, width: usize },

    #[error("mask data has {actual} values, expected {expected}")]
    DataLength { expected: usize, actual: usize },

    #[error("mask value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f32 },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("no candidate has a box score above the threshold")]
    NoValidCandidates,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("could not place {instance} disjoint instances after {attempts} attempts")]
    Placement { instance: usize, attempts: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
