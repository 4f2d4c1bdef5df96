use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: value {value} outside the domain of the operation")]
    Domain { op: &'static str, value: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: &'static str, row: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("checkpoint does not match model skeleton: {0}")]
    Skeleton(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Whether the failure stems from the caller's input (flags, files,
    /// shapes) rather than from a numerical or runtime problem.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Contract(_) | Error::Shape { .. } | Error::Io(_) | Error::Skeleton(_)
        )
    }
}
