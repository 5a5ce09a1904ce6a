use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient distinct points: need {needed}, found {found}")]
    InsufficientDistinctPoints { needed: usize, found: usize },

    #[error("unindexable object {0}: every component is zero")]
    Unindexable(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("duplicate document id: {0}")]
    DuplicateDocument(String),

    #[error("index has no documents")]
    EmptyIndex,

    #[error("index is not sealed")]
    NotSealed,

    #[error("index is sealed and cannot accept documents")]
    AlreadySealed,

    #[error("unknown term: {0}")]
    UnknownTerm(String),

    #[error("no stored vector for document {0}")]
    MissingVector(String),

    #[error("no result list for query {0}")]
    MissingQuery(String),

    #[error("relevant set is empty")]
    EmptyRelevantSet,

    #[error("reference mode mismatch: expected {expected}, got {actual}")]
    ModeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
