//! Error type shared by all engine stages.

use thiserror::Error;

/// Errors surfaced by the recognition engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent option combination.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data violates a precondition (non-finite values, empty class, ...).
    #[error("data error: {0}")]
    Data(String),
    /// Dimension mismatch between an input and a model.
    #[error("shape error: {0}")]
    Shape(String),
    /// Input too short to produce any output.
    #[error("empty input: {0}")]
    EmptyInput(String),
    /// Fewer frames than the operation needs.
    #[error("insufficient frames: {0}")]
    InsufficientFrames(String),
    /// Too little data to train a model.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// Trial lists too small to compute a metric.
    #[error("insufficient trials: {0}")]
    InsufficientTrials(String),
    /// Fewer than two classes where class structure is required.
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    /// Not enough vectors to estimate a full-rank covariance.
    #[error("rank deficiency: {0}")]
    RankDeficiency(String),
    /// A vector that cannot be normalized or used as a direction.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    /// Mixed embedding kinds where a single kind is required.
    #[error("kind mismatch: {0}")]
    KindMismatch(String),
    /// Inputs that cannot be fused (kind or track mismatch).
    #[error("fusion error: {0}")]
    Fusion(String),
    /// Numerical failure: singular system, non-PD covariance, NaN loss.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Evaluation-protocol violation (splits, overlaps, track counts).
    #[error("protocol violation: {0}")]
    Protocol(String),
    /// Malformed external file (WAV header, manifest field, ...).
    #[error("format error: {0}")]
    Format(String),
    /// Damaged or inconsistent model container.
    #[error("corrupt container: {0}")]
    Corruption(String),
    /// Container written by an unsupported format version.
    #[error("unsupported container version: {0}")]
    UnsupportedVersion(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
