//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A scalar parameter is out of its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Spatial condition grid is not congruent with the image grid.
    #[error("grid alignment error: {0}")]
    Alignment(String),

    /// Keyword mask thresholding left no active image token.
    #[error("degenerate keyword mask: no image token cleared the threshold")]
    DegenerateMask,

    /// A query row ended up with zero permitted keys.
    #[error("query row {row} has no permitted keys")]
    EmptyQueryRow { row: usize },

    /// Condition cache queried for an entry that was never populated.
    #[error("cache miss: layer {layer}, condition {condition}")]
    CacheMiss { layer: usize, condition: usize },

    /// Condition cache populated twice.
    #[error("condition cache is already populated")]
    CachePopulated,

    /// Instrumented counters diverged from the closed-form cost prediction.
    #[error("cost accounting mismatch in {field}: measured {measured}, predicted {predicted}")]
    AccountingMismatch {
        field: &'static str,
        measured: u64,
        predicted: u64,
    },

    /// Autodiff tape asked to differentiate through an unregistered op.
    #[error("unsupported operation on tape: {0}")]
    UnsupportedOp(String),

    /// Training loss became non-finite.
    #[error("training diverged at iteration {iteration} (loss {loss})")]
    TrainingDiverged { iteration: usize, loss: f64 },

    /// A verification or acceptance run failed its stated tolerance.
    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error("malformed tensor file: {0}")]
    TensorFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
