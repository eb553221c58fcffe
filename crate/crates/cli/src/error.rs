use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pointshield::Error),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for bad configuration, 3 for I/O and unreadable inputs, 4 for
    /// numerical divergence.
    pub fn exit_code(&self) -> i32 {
        use pointshield::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::Contract(_)
                | E::Shape { .. }
                | E::Index { .. }
                | E::EmptyPopulation(_) => 2,
                E::Io { .. } | E::Parse { .. } | E::Checkpoint(_) | E::EmptyCloud => 3,
                E::Diverged { .. } | E::Numerical(_) => 4,
            },
        }
    }
}
