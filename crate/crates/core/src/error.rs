use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("degenerate label set: {0}")]
    DegenerateLabels(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("unknown sample `{0}`")]
    UnknownSample(String),

    #[error("unknown attack `{name}`; registered attacks: {registered}")]
    UnknownAttack { name: String, registered: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("query budget exceeded: {requested} extra queries requested, budget is {budget}")]
    BudgetExceeded { requested: usize, budget: usize },

    #[error("oracle capability error: {0}")]
    Capability(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (as opposed to failures while
    /// running an otherwise valid request).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::DegenerateLabels(_)
                | Error::UnknownModel(_)
                | Error::UnknownSample(_)
                | Error::UnknownAttack { .. }
                | Error::Dimension { .. }
                | Error::MissingInput(_)
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}
