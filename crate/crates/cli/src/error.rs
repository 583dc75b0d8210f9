use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    /// Unreadable or invalid configuration, unknown fixture, unsupported
    /// request, or a missing input file.
    pub const CONFIG: i32 = 2;
    /// A version space emptied out.
    pub const ASSUMPTION: i32 = 3;
    /// The online phase hit its iteration cap.
    pub const CAP: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] rfolive::Error),

    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use rfolive::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Core(E::InvalidInput(_) | E::InvalidModel(_) | E::Unsupported(_) | E::Json(_)) => exit::CONFIG,
            CliError::Core(E::AssumptionViolation(_)) => exit::ASSUMPTION,
            CliError::Core(E::CapExceeded { .. }) => exit::CAP,
            CliError::Core(E::Generator(_)) | CliError::Io { .. } => exit::OTHER,
        }
    }
}
