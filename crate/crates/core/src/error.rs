use std::path::PathBuf;

/// Unified error type for every fallible operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line count mismatch: {source_lines} source lines vs {target_lines} target lines")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
    },

    #[error("empty {side} sentence on line {line}")]
    EmptyLine { side: &'static str, line: usize },

    #[error("corpus contains no sentence pairs")]
    EmptyCorpus,

    #[error("dev set contains no sentence pairs")]
    EmptyDevSet,

    #[error("no training examples collected")]
    NoExamples,

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },

    #[error("sentence pair id {id} out of range for corpus of {pairs} pairs")]
    PairOutOfRange { id: u32, pairs: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid {what}: {detail}")]
    InvalidParameter { what: &'static str, detail: String },

    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("malformed {what} in {path}: {detail}")]
    Format {
        path: PathBuf,
        what: &'static str,
        detail: String,
    },

    #[error("hypothesis count {hyps} does not match reference count {refs}")]
    LengthMismatch { hyps: usize, refs: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("probability vector sums to {sum}, expected 1")]
    NotNormalized { sum: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an io::Error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidParameter {
            what,
            detail: detail.into(),
        }
    }
}
