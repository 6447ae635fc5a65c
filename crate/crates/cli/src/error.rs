use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Model(#[from] microtopt::Error),

    #[error("{failed} of {total} gradient samples failed")]
    GradcheckFailed { failed: usize, total: usize },
}

impl CliError {
    /// Process exit status: 1 usage/config, 2 solver, 3 gradcheck.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Model(microtopt::Error::InvalidArgument(_)) => 1,
            CliError::Model(_) => 2,
            CliError::GradcheckFailed { .. } => 3,
        }
    }
}
