//! Structured error type shared by the whole crate.
//!
//! Contract errors (shape mismatches, bad configs, malformed files) are
//! reported through [`Error`]; internal invariant violations that can only
//! arise from bugs use assertions instead.

use crate::tensor::Shape;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensor shapes that were required to agree did not.
    #[error("shape mismatch in `{op}`: {lhs} vs {rhs}")]
    ShapeMismatch {
        /// Operation that rejected the shapes.
        op: &'static str,
        /// Left-hand / first shape.
        lhs: Shape,
        /// Right-hand / second shape.
        rhs: Shape,
    },

    /// A single tensor had a shape the operation cannot accept.
    #[error("invalid shape in `{op}`: {shape} ({reason})")]
    BadShape {
        /// Operation that rejected the shape.
        op: &'static str,
        /// Offending shape.
        shape: Shape,
        /// Why it was rejected.
        reason: String,
    },

    /// Numeric or structural configuration error (bad stride, part count,
    /// indivisible channel reduction, …).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A value that must stay within a documented range fell outside it.
    #[error("{what} out of range: {value} (allowed {allowed})")]
    OutOfRange {
        /// Name of the quantity.
        what: &'static str,
        /// Offending value, rendered.
        value: String,
        /// Human-readable allowed range.
        allowed: String,
    },

    /// Malformed container/checkpoint/manifest data.
    #[error("parse error at byte {offset}: {reason}")]
    Parse {
        /// Byte offset of the first invalid byte.
        offset: u64,
        /// What went wrong.
        reason: String,
    },

    /// Dataset/batch construction cannot satisfy the request.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint does not match the model it is being loaded into.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;
