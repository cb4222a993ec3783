use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: {0}")]
    Corruption(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dangling reference: {}", .0.display())]
    Reference(PathBuf),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing layer tap {0}")]
    Tap(usize),

    #[error("size error: {0}")]
    Size(String),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("unknown task id {0}")]
    Lookup(usize),

    #[error("numeric error at {stage}: {term} is {value}")]
    Numeric {
        stage: String,
        term: &'static str,
        value: f64,
    },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
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

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors caused by bad user input (arguments, manifests,
    /// configs) rather than failures while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Schema(_) | Error::Reference(_) | Error::Validation(_) | Error::Config(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
