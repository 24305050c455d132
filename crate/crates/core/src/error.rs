use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong inside the engine.
///
/// Variants map one-to-one onto the failure classes of the public
/// operations so callers (and the CLI's exit codes) can tell a bad
/// configuration apart from bad data or a failed read.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },

    #[error("perturbation window start {w} outside [1, {q_len}]")]
    Window { w: usize, q_len: usize },

    #[error("position {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("accumulator error: {0}")]
    Accumulator(String),

    #[error("unsupported semantics: {0}")]
    UnsupportedSemantics(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ordering error: position {pos} does not follow last position {last}")]
    Ordering { pos: usize, last: usize },

    #[error("trace magic mismatch")]
    BadMagic,

    #[error("trace version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("trace shape inconsistency: {0}")]
    TraceShape(String),

    #[error("trace truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("trace header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse failure classes; the CLI turns these into exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Data,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Window { .. } | Error::Metric(_) => ErrorClass::Config,
            Error::Io(_) => ErrorClass::Io,
            _ => ErrorClass::Data,
        }
    }
}
