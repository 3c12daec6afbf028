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

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown descriptor '{descriptor}' in category '{category}', line {line}")]
    UnknownDescriptor {
        descriptor: String,
        category: String,
        line: usize,
    },

    #[error("duplicate id '{0}'")]
    DuplicateId(String),

    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("invalid track '{id}': {message}")]
    InvalidTrack { id: String, message: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{primitive}: shape mismatch {shapes}")]
    Shape { primitive: &'static str, shapes: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    BadVersion(u16),

    #[error("truncated record at byte offset {offset}")]
    Truncated { offset: u64 },

    #[error("missing embedding for id '{0}'")]
    MissingEmbedding(String),

    #[error("config error at '{path}': {message}")]
    Config { path: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(primitive: &'static str, shapes: impl Into<String>) -> Self {
        Error::Shape {
            primitive,
            shapes: shapes.into(),
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether this failure is numerical (NaN loss, NaN gradient) rather than
    /// a data or configuration problem.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
