//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected square trailing dimensions, got {shape:?}")]
    NotSquare { op: &'static str, shape: Vec<usize> },

    #[error("softmax row {row} is fully masked")]
    DegenerateSoftmaxRow { row: usize },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("backward target must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    #[error("cross-entropy with every position ignored")]
    EmptyLoss,

    #[error("sequence of {len} tokens exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence of {len} tokens is too short (need BOS, EOS and room to attend)")]
    SequenceTooShort { len: usize },

    #[error("token id {id} out of range for vocabulary of {vocab} entries")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("mask position {pos} outside interior range 1..={max}")]
    PositionOutOfRange { pos: usize, max: usize },

    #[error("invalid model configuration: {0}")]
    BadConfig(String),

    #[error("invalid training configuration: {0}")]
    BadTrainConfig(String),

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGrad { param: String },

    #[error("non-finite value in parameter {param}")]
    NonFiniteParam { param: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("empty text cannot be encoded")]
    EmptyText,

    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,

    #[error("correlation of a constant series is undefined")]
    ConstantSeries,

    #[error("pearson needs at least 2 points with equal lengths, got {lhs} and {rhs}")]
    SeriesLength { lhs: usize, rhs: usize },

    #[error("{context}: expected {expected} language-model scores, got {got}")]
    MisalignedScores {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("group {group} has no reference sentence")]
    MissingReference { group: String },

    #[error("lambda grid is empty")]
    EmptyGrid,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error("need at least 3 distinct lengths for a log-log fit, got {0}")]
    TooFewLengths(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Cli(String),
}
