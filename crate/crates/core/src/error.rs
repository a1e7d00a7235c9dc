use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("unknown example id {id} in {split} split")]
    UnknownExample { id: usize, split: String },

    #[error("verbalizer {verbalizer:?} renders to {tokens} tokens, expected exactly 1")]
    Verbalizer { verbalizer: String, tokens: usize },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("pool invariant violated: {0}")]
    Pool(String),

    #[error("collection aborted: {failed} of {total} prompts failed (limit 1%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("singular normal system: {0}")]
    Singular(String),

    #[error("datamodel fit failed for dev example {dev_id} in bucket {bucket}: {message}")]
    Fit {
        dev_id: usize,
        bucket: String,
        message: String,
    },

    #[error("selection error: {0}")]
    Selection(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
