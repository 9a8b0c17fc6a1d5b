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

    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error in table `{table_id}`: {message}")]
    Schema {
        line: usize,
        table_id: String,
        message: String,
    },

    #[error("line {line}: duplicate table id `{table_id}`")]
    DuplicateTable { line: usize, table_id: String },

    #[error("line {line}: annotation error: {message}")]
    Annotation { line: usize, message: String },

    #[error("embedding file format error at byte {offset}: {message}")]
    EmbeddingFormat { offset: usize, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite loss in head `{head}` (value {value})")]
    NonFiniteLoss { head: &'static str, value: f64 },

    #[error("missing embeddings for example `{0}`")]
    MissingEmbeddings(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
