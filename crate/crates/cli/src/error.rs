use hedgeplan::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{failed} gradient check(s) above tolerance")]
    ChecksFailed { failed: usize },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 config, 3 data, 4 training/numerics, 1 failed gradient checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::ChecksFailed { .. } => 1,
            CliError::Core(Error::Config(_)) => 2,
            CliError::Core(e) if e.is_data() => 3,
            CliError::Core(_) => 4,
        }
    }
}
