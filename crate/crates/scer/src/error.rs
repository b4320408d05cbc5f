//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite input: {context}")]
    NonFinite { context: String },

    #[error("matrix is not positive definite: leading minor of order {minor} is not positive")]
    NotPositiveDefinite { minor: usize },

    #[error(
        "quadratic form is negative beyond tolerance ({value}); matrix is not positive definite"
    )]
    NegativeQuadraticForm { value: f64 },

    #[error("empty input: {context}")]
    EmptyInput { context: String },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("no class has two domains present in the batch (spurious) or no domain has two classes (core): {context}")]
    MissingPairs { context: String },

    #[error("zero direction or zero classifier column: {context}")]
    ZeroDirection { context: String },

    #[error("identical classifier columns for pair ({i}, {j})")]
    IdenticalColumns { i: usize, j: usize },

    #[error("invalid probability table: {context}")]
    InvalidProbabilities { context: String },

    #[error("invalid configuration at {path}: {message}")]
    InvalidConfig { path: String, message: String },

    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged { step: usize, what: String },

    #[error("schema error: {context}")]
    Schema { context: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
