use mosic_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    /// Usage problem detected by the command itself.
    #[error("{0}")]
    Usage(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 config or usage, 3 data, 4 numerical.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.root() {
                Error::Config { .. } => 2,
                Error::Numerical(_) => 4,
                _ => 3,
            },
            CliError::Usage(_) => 2,
            CliError::GradCheck(_) => 4,
            CliError::Csv(_) | CliError::Io(_) => 3,
        }
    }
}
