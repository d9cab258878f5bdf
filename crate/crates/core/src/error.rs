use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SpaError>;

#[derive(Debug, Error)]
pub enum SpaError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {actual} bytes, header declares {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },
    #[error("label {value} at position {position} is outside [0, {k})")]
    OutOfRangeLabel { position: usize, value: usize, k: usize },
    #[error("parse error on line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row {row} of text embeddings has norm {norm}, expected 1")]
    NormViolation { row: usize, norm: f64 },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("edge ({from}, {to}) references an unknown phase")]
    UnknownNodeInEdge { from: usize, to: usize },
    #[error("phase {phase}: min_duration {min} exceeds max_duration {max} or is zero")]
    DurationOrderViolation { phase: usize, min: usize, max: usize },
    #[error("no phase is flagged as a start phase")]
    NoStartPhase,
    #[error("non-terminal phase {phase} has no outgoing edge")]
    DeadEndPhase { phase: usize },
    #[error("no terminal phase is reachable from start phase {start}")]
    UnreachableTerminal { start: usize },
    #[error("invalid task graph: {0}")]
    InvalidGraph(String),
    #[error("max_len {max_len} cannot hold a single minimal segment ({needed} frames)")]
    MaxLenTooSmall { max_len: usize, needed: usize },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("step {step} outside [{min}, {max}]")]
    StepOutOfRange { step: usize, min: usize, max: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("fusion weights must be non-negative and sum to 1, got {0:?}")]
    WeightViolation(Vec<f64>),
    #[error("could not place {k} prototypes with cosine <= {bound} after {attempts} attempts")]
    PackingFailure { k: usize, bound: f64, attempts: usize },
    #[error("prediction has {pred} frames, ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("invalid probability matrix: {0}")]
    InvalidProbabilities(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SpaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpaError::Io { path: path.into(), source }
    }

    /// Validation failures (bad inputs) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            SpaError::Io { .. } | SpaError::NonFiniteLoss { .. } | SpaError::PackingFailure { .. }
        )
    }
}
