use nepqa_core::corpus::CorpusError;
use nepqa_core::dialogue::DialogueError;
use nepqa_core::ModelError;

/// Command failure, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    #[error("usage: {0}")]
    Usage(String),
    /// Unreadable or invalid input data; exit code 2.
    #[error("data: {0}")]
    Data(String),
    /// Training, inference or output failure; exit code 3.
    #[error("runtime: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub(crate) fn io(what: impl std::fmt::Display, e: std::io::Error) -> CliError {
        CliError::Runtime(format!("{what}: {e}"))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<DialogueError> for CliError {
    fn from(e: DialogueError) -> Self {
        CliError::Usage(e.to_string())
    }
}
