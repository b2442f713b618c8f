//! Crate-wide error type.
//!
//! Everything user-facing funnels through [`Error`]: shape mismatches carry
//! both offending shapes, configuration problems carry the field path, and
//! degenerate statistics (empty groups, single-class labels, …) get their own
//! variants so callers can branch on them instead of string-matching.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor / matrix operation received incompatible shapes.
    #[error("shape mismatch in {op}: left {lhs:?} vs right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation received a shape it cannot work with (wrong rank, odd
    /// spatial size for pooling, axis out of range, …).
    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// A scalar argument was outside its documented domain.
    #[error("invalid argument for {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    /// Configuration file problems; `path` is the offending field.
    #[error("invalid config at `{path}`: {reason}")]
    Config { path: String, reason: String },

    /// A statistic is undefined on the given data (empty group, zero
    /// variance where it matters, single-class labels, …).
    #[error("degenerate input for {what}: {reason}")]
    Degenerate { what: &'static str, reason: String },

    /// Checkpoint or data file contents do not match what was expected.
    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

}
