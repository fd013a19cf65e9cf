use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("truncated weights: expected {expected} bytes, found {actual}")]
    TruncatedWeights { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid plan: {0}")]
    Plan(#[from] PlanError),

    #[error("cache state: {0}")]
    CacheState(String),

    #[error("oracle mismatch: {0}")]
    OracleMismatch(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Validation failures for lazy plans. Block indices refer to the position
/// of the block in the plan's `blocks` list.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("epsilon {0} outside (0, 1]")]
    Epsilon(f64),

    #[error("unknown mode {0:?} (expected \"gla\" or \"vla\")")]
    UnknownMode(String),

    #[error("unknown source {0:?} (expected \"threshold\" or \"random\")")]
    UnknownSource(String),

    #[error("block {block} has no lazy layers")]
    EmptyBlock { block: usize },

    #[error("block {block}: lazy layers must directly follow anchor {anchor} consecutively")]
    NonContiguous { block: usize, anchor: usize },

    #[error("block {block}: layer {layer} out of range for {n_layers} layers")]
    OutOfRange { block: usize, layer: usize, n_layers: usize },

    #[error("overlapping blocks {first} and {second}")]
    Overlapping { first: usize, second: usize },

    #[error("blocks {first} and {second} are not sorted by anchor")]
    Unsorted { first: usize, second: usize },

    #[error("plan covers {plan} layers but model has {model}")]
    LayerCount { plan: usize, model: usize },

    #[error("max block span must be at least 2, got {0}")]
    MaxSpan(usize),

    #[error("cannot pack blocks with spans {spans:?} into {n_layers} layers")]
    Infeasible { spans: Vec<usize>, n_layers: usize },
}
