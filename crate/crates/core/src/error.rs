use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("numeric-input error: {0}")]
    Numeric(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("optimizer error: non-finite gradient in parameter group `{0}`")]
    Optimizer(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("decode error in {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("load error: {0}")]
    Load(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by how the library was called rather than by
    /// the data or configuration it was given.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
