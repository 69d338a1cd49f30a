//! Error types shared across the crate.

use thiserror::Error;

/// Reason a feature track was rejected by a triangulation gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateReason {
    /// Observed segment shorter than the minimum pixel length.
    SegmentLength,
    /// Distance from the global origin to the line outside the accepted band.
    OriginDistance,
    /// Stacked-plane SVD too close to isotropic to pin down the line.
    SvdConditioning,
    /// Refined line still leaves large endpoint residuals.
    Reprojection,
}

impl std::fmt::Display for GateReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GateReason::SegmentLength => write!(f, "segment length"),
            GateReason::OriginDistance => write!(f, "origin distance"),
            GateReason::SvdConditioning => write!(f, "svd conditioning"),
            GateReason::Reprojection => write!(f, "reprojection residual"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate line: {0}")]
    DegenerateLine(&'static str),
    #[error("clone window full ({0} clones)")]
    WindowFull(usize),
    #[error("clone window is empty")]
    EmptyWindow,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty IMU batch")]
    EmptyBatch,
    #[error("non-monotonic timestamps at t={0}")]
    NonMonotonicTime(f64),
    #[error("point behind camera (z={0})")]
    BehindCamera(f64),
    #[error("degenerate line projection")]
    DegenerateProjection,
    #[error("insufficient parallax")]
    InsufficientParallax,
    #[error("gate rejected: {0}")]
    GateRejected(GateReason),
    #[error("no clone at t={0}")]
    MissingClone(f64),
    #[error("rank-deficient feature Jacobian")]
    RankDeficientFeature,
    #[error("message feature id mismatch: {0} vs {1}")]
    FeatureMismatch(u64, u64),
    #[error("singular innovation (cond={0:.3e})")]
    SingularInnovation(f64),
    #[error("series length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("covariance lost positive semi-definiteness (min eig {0:.3e})")]
    Consistency(f64),
    #[error("invalid CI weights: {0}")]
    InvalidWeights(String),
    #[error("time {0} outside trajectory support [{1}, {2}]")]
    OutOfRange(f64, f64, f64),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
