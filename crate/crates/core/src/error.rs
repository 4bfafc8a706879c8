//! Crate-wide error type.
//!
//! Variants are grouped by failure class so the CLI can map them onto exit
//! codes: numeric failures (non-finite values, failed gradient checks) are
//! distinct from data/format problems and from plain misuse.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes, caught eagerly at op construction.
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced NaN or Inf.
    #[error("non-finite values produced by `{op}`")]
    NonFinite { op: String },

    /// A gradient was non-finite when an optimizer step was attempted.
    #[error("non-finite gradient in parameter `{param}`; step aborted")]
    NonFiniteGrad { param: String },

    /// Misuse of the tape API (e.g. backward on a foreign value id).
    #[error("tape usage error: {0}")]
    Tape(String),

    /// Invalid model/schedule configuration, with the violated rule.
    #[error("invalid config: {0}")]
    Config(String),

    /// A gradient check could not be run (bad eps, non-deterministic f, ...).
    #[error("gradient check invalid: {0}")]
    GradCheck(String),

    /// Malformed manifest line.
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    /// Malformed raster file. `offset` is the byte position of the problem.
    #[error("raster format error at byte {offset}: {msg}")]
    Raster { offset: usize, msg: String },

    /// Malformed or mismatched checkpoint. `offset` is the byte position.
    #[error("checkpoint error at byte {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },

    /// Evaluation requested over an empty record set.
    #[error("evaluation set is empty")]
    EmptyEval,

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures of the numeric kind (CLI exit code 3).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteGrad { .. } | Error::GradCheck(..)
        )
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
