//! Error type shared by every module in the crate.

use alloc::string::String;
use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors produced by matrix arithmetic, the tape, and the trainer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Two operands have incompatible shapes for the named operation.
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    /// An index (node id, mask entry, class label) is out of bounds.
    #[error("{context}: index {index} out of bounds for length {len}")]
    IndexOutOfBounds {
        context: &'static str,
        index: usize,
        len: usize,
    },

    /// A graph violated a structural invariant at construction time.
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    /// A training configuration field is outside its legal range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// `backward` was called on a tape with no recorded forward pass.
    #[error("backward called before any forward pass was recorded")]
    NoForwardRecorded,

    /// `backward` was called twice on the same tape.
    #[error("backward already consumed this tape")]
    BackwardAlreadyRun,

    /// An operation that needs at least one masked row received none.
    #[error("{0}: mask is empty")]
    EmptyMask(&'static str),
}

impl Error {
    pub(crate) fn dim_mismatch(
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    ) -> Self {
        Error::DimMismatch { op, left, right }
    }
}
