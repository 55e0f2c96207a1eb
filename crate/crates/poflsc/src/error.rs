use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Failure = 1,
    Invalid = 2,
    NoPool = 3,
    ChainFail = 4,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] poflsc_core::Error),

    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        use poflsc_core::Error as E;
        match self {
            CliError::Core(E::NoPoolFormed) => ExitCode::NoPool,
            CliError::Core(
                E::ConfigInvalid { .. }
                | E::BadParams(_)
                | E::BadMagic { .. }
                | E::CountMismatch { .. }
                | E::TruncatedFile { .. }
                | E::InvalidLabel { .. }
                | E::DatasetTooSmall { .. }
                | E::Decode { .. },
            ) => ExitCode::Invalid,
            CliError::Read { .. } | CliError::Parse { .. } | CliError::Usage(_) => ExitCode::Invalid,
            _ => ExitCode::Failure,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
