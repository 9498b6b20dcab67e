use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to diagnose a
/// failure without a debugger: offending shapes, feature names, byte or
/// line positions.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, lhs is {lhs_rows}x{lhs_cols}, rhs is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("{op}: invalid shape {rows}x{cols}: {reason}")]
    InvalidShape {
        op: &'static str,
        rows: usize,
        cols: usize,
        reason: String,
    },

    #[error("{op}: non-finite value ({value}) at row {row}, col {col}")]
    NonFinite {
        op: &'static str,
        value: f64,
        row: usize,
        col: usize,
    },

    #[error("{op}: index {index} out of bounds for {bound}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("attention: every key is masked for at least one query row")]
    DegenerateAttention,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{metric} is undefined: {reason}")]
    UndefinedMetric { metric: &'static str, reason: String },

    #[error("data error at line {line}: {reason}")]
    Data { line: usize, reason: String },

    #[error("feature '{feature}': {reason}")]
    Ingest { feature: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(line: usize, reason: impl Into<String>) -> Self {
        Error::Data { line, reason: reason.into() }
    }

    pub fn ingest(feature: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Ingest { feature: feature.into(), reason: reason.into() }
    }
}
