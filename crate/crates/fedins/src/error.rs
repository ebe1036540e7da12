use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// A problem in a config file or override, located by line.
    #[error("{origin}:{line}: {message}")]
    ConfigLine {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] fedins_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("verification mismatch: {0}")]
    Mismatch(String),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit status: 1 config, 2 runtime, 3 verification mismatch.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::ConfigLine { .. } | Self::Config(_) | Self::Core(fedins_core::Error::Config(_)) => 1,
            Self::Mismatch(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
