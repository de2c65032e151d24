use std::io;
use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, CliError>;

/// Exit-code classes shared by every subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Usage = 1,
    Io = 2,
    Data = 3,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] emovox_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data-consistency error in {}: {detail}", path.display())]
    Data { path: PathBuf, detail: String },
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn data(path: &Path, detail: impl Into<String>) -> Self {
        CliError::Data {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ExitClass {
        use emovox_core::Error as E;
        match self {
            CliError::Io { .. } => ExitClass::Io,
            CliError::Data { .. } => ExitClass::Data,
            CliError::Core(E::Data { .. } | E::NonFinite { .. }) => ExitClass::Data,
            CliError::Core(_) | CliError::Config(_) | CliError::Usage(_) => ExitClass::Usage,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class() as i32
    }
}

/// Attaches a path to an IO result.
pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| CliError::io(path, e))
    }
}
