use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("line {line}: rating out of range: {rating} not in [{min}, {max}]")]
    RatingOutOfRange {
        line: u64,
        rating: f64,
        min: f64,
        max: f64,
    },

    #[error("duplicate (user, item) pair ({user}, {item}) at lines {first_line} and {second_line}")]
    DuplicatePair {
        user: String,
        item: String,
        first_line: u64,
        second_line: u64,
    },

    #[error("user {user} has {count} interaction(s); at least {required} required")]
    TooFewInteractions {
        user: String,
        count: usize,
        required: usize,
    },

    #[error("index out of range: {what} {index} >= {bound}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at iteration {iteration} on user {user} (score {score})")]
    Diverged {
        iteration: usize,
        user: usize,
        score: f64,
    },

    #[error("item space mismatch: {0}")]
    ItemSpaceMismatch(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
