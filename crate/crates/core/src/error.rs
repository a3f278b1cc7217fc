use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("at least two classes are required, got {0}")]
    TooFewClasses(usize),

    #[error("insufficient class support: class {class} has count {count}")]
    InsufficientClassSupport { class: usize, count: i64 },

    #[error("degenerate prior: class {class} holds all of the probability mass")]
    DegeneratePrior { class: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("target row {row} is not one-hot")]
    InvalidTarget { row: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range (expected {min}..={max})")]
    LabelOutOfRange { label: usize, min: usize, max: usize },

    #[error("duplicate pair (image {image}, subject {subject}, object {object})")]
    DuplicatePair { image: u64, subject: u64, object: u64 },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(&'static str),

    #[error("could not draw a sample with every class represented after {0} attempts")]
    ZipfRetriesExhausted(usize),

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
