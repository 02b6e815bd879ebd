use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("signal too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("too few frames{}: got {got}, need at least {needed}", fmt_segment(.segment))]
    TooFewFrames {
        segment: Option<String>,
        got: usize,
        needed: usize,
    },

    #[error("training data has only {distinct} distinct frames, cannot place {k} distinct centroids")]
    TooFewDistinctFrames { distinct: usize, k: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("segment {0} has no frames")]
    EmptySegment(String),

    #[error("histogram has no nonzero bin")]
    ZeroVector,

    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    #[error("index has no candidate segments")]
    EmptyIndex,

    #[error("duplicate segment id {0}")]
    DuplicateSegmentId(String),

    #[error("unknown segment id {0}")]
    UnknownSegmentId(String),

    #[error("segment {0} has no speaker label")]
    MissingLabels(String),

    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn fmt_segment(segment: &Option<String>) -> String {
    match segment {
        Some(id) => format!(" in segment {id}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
