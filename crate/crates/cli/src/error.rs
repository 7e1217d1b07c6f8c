use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: metaloss::Error,
    },

    #[error(transparent)]
    Core(#[from] metaloss::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{failed} of {total} runs failed; see messages above")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn context(context: impl Into<String>) -> impl FnOnce(metaloss::Error) -> Self {
        let context = context.into();
        move |source| Self::Run { context, source }
    }

    /// 2 for invalid input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(metaloss::Error::Split(_)) => 2,
            _ => 1,
        }
    }
}
