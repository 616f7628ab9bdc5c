use std::path::PathBuf;

/// Any failure of a command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] opunet::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("writing output: {0}")]
    Output(#[source] std::io::Error),
    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    /// 1 usage/config, 2 data/format, 3 non-finite, 4 gradcheck failure.
    pub fn exit_code(&self) -> u8 {
        use opunet::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::Config(_) | E::InvalidArgument(_)) => 1,
            CliError::Core(E::NonFinite(_)) => 3,
            CliError::Core(_) | CliError::Io { .. } | CliError::Output(_) => 2,
            CliError::GradcheckFailed(_) => 4,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
