use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("malformed record {id}: {reason}")]
    MalformedRecord { id: String, reason: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("requested {n} examples but the split only has {size}")]
    NTooLarge { n: usize, size: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("results were computed on different gold splits")]
    SplitMismatch,

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("no training pairs")]
    EmptyPairs,

    #[error("reader state {actual} does not match checkpoint {expected}")]
    CheckpointMismatch { expected: String, actual: String },

    #[error("no scores to select from")]
    EmptyScores,

    #[error("example {0} has no generation log-likelihood")]
    MissingLogLik(String),

    #[error("selection batch of {0} exceeds the enumeration limit")]
    BatchTooLarge(usize),

    #[error("AUC needs both classes present")]
    SingleClass,

    #[error("records were evaluated on different eval splits")]
    MixedEvalSplits,

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    StageFailure {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("learner failure on {item}: {message}")]
    Learner { item: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Parse {
            what: what.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::StageFailure {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
