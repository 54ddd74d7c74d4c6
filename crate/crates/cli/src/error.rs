use hessianscope::Error;

/// Failures surfaced by the command-line front end, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{failed} acceptance check(s) failed")]
    ChecksFailed { failed: usize },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidSpec(_)
            | Error::InvalidArgument(_)
            | Error::LabelOutOfRange { .. }
            | Error::DimensionMismatch { .. }
            | Error::SpecMismatch
            | Error::EmptyBatch
            | Error::CapExceeded { .. }
            | Error::Parse { .. }
            | Error::Json(_) => CliError::Config(e.to_string()),
            Error::Io(io) => CliError::Io(io),
            other => CliError::Numerical(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::ChecksFailed { .. } => 4,
        }
    }
}
