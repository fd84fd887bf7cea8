//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("non-finite value produced by {op} (element {index})")]
    NonFinite { op: &'static str, index: usize },

    #[error("backward on a tensor detached from this tape")]
    DetachedTensor,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("gradient check: function is not deterministic ({0} vs {1})")]
    NonDeterministicFunction(f64, f64),

    #[error("gradient check: eps {0} outside [1e-7, 1e-3]")]
    BadEps(f64),

    #[error("parameter {0} has no populated gradient")]
    MissingGrad(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("loss mask selects no positions")]
    EmptyLossMask,

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),

    #[error("triplet batch needs P >= 2 identities and K >= 2 samples each, got P={p}, K={k}")]
    BadTripletBatch { p: usize, k: usize },

    #[error("image slot count mismatch: sequence has {seq}, encoder provides {provided}")]
    SlotMismatch { seq: usize, provided: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("{0}")]
    Tokenizer(String),

    #[error("{0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainAborted { step: usize, reason: String },

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("config: {0}")]
    Config(String),

    #[error("unknown config key `{key}`{}", suggestion.as_ref().map(|s| format!(", did you mean `{s}`?")).unwrap_or_default())]
    UnknownConfigKey {
        key: String,
        suggestion: Option<String>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code per the CLI contract: 1 usage/config, 2 invariant, 3 runtime/numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownConfigKey { .. } => 1,
            Error::NonFinite { .. } | Error::TrainAborted { .. } => 3,
            Error::Io(_) | Error::Json(_) => 3,
            _ => 2,
        }
    }
}
