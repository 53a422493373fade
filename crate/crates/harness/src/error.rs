use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("conflicting values for `{key}`: `{first}` and `{second}`")]
    Conflict { key: String, first: String, second: String },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("training `{model}` failed: {source}")]
    Training {
        model: String,
        #[source]
        source: tesser_core::Error,
    },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: tesser_core::Error,
    },

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Check(String),
}

impl HarnessError {
    /// Short stable tag for the one-line CLI error format.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config { .. } => "config",
            HarnessError::Conflict { .. } => "conflict",
            HarnessError::UnknownModel(_) => "unknown-model",
            HarnessError::Training { .. } => "training",
            HarnessError::Core { .. } => "core",
            HarnessError::Output { .. } => "output",
            HarnessError::Input { .. } => "input",
            HarnessError::Check(_) => "check",
        }
    }

    pub(crate) fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        HarnessError::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }
}

pub(crate) trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for std::result::Result<T, tesser_core::Error> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| HarnessError::Core { context: what(), source })
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
