use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    DimMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("sequence too short for conv1d: length {len} with kernel width {kernel_width} and padding {padding}")]
    SequenceTooShort {
        len: usize,
        kernel_width: usize,
        padding: usize,
    },

    #[error("empty sequence passed to {op}")]
    EmptySequence { op: &'static str },

    #[error("invalid conv parameters: {reason}")]
    InvalidConv { reason: String },

    #[error("backward() already ran on this tape")]
    BackwardAlreadyRun,

    #[error("backward() requires a 1x1 scalar loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite value encountered in {what}")]
    NonFinite { what: String },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGrad { param: String },

    #[error("gradient audit failure: {0}")]
    AuditFailure(String),

    #[error("unknown language id {id} for bank of size {bank_size}")]
    UnknownLanguage { id: usize, bank_size: usize },

    #[error("empty projector group for family {family}")]
    EmptyGroup { family: usize },

    #[error("empty expert bank")]
    EmptyBank,

    #[error("top-k out of range: k={k} with {m} experts")]
    KOutOfRange { k: usize, m: usize },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("training diverged at step {step}: loss is non-finite")]
    Diverged { step: usize },

    #[error("empty dataset passed to {op}")]
    EmptyDataset { op: &'static str },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
