use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("data error: {0}")]
    Data(String),

    /// A column carries no information the flow could learn from.
    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("training error at batch {batch}: {message}")]
    Training { batch: usize, message: String },

    #[error("task error: {0}")]
    Task(String),

    #[error("column `{column}`: {source}")]
    Column {
        column: String,
        #[source]
        source: Box<Error>,
    },

    #[error("model file integrity error: {0}")]
    Integrity(String),

    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_column(self, column: &str) -> Self {
        Error::Column {
            column: column.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with any column context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Column { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures caused by the numbers themselves (divergent training,
    /// invalid parameters) rather than by the input data or files.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            Error::Training { .. } | Error::Parameter(_) | Error::Config(_)
        )
    }
}
