use readme_drift::forge::ForgeError;

/// Failure carrying the process exit code: 2 for input or configuration
/// problems, 3 for backends (forge, chat, embedding) that could not be used.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0:#}")]
    Input(anyhow::Error),
    #[error("{0:#}")]
    Backend(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn input(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Input(e.into())
}

pub fn backend(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Backend(e.into())
}

impl From<ForgeError> for CliError {
    fn from(e: ForgeError) -> Self {
        match e {
            ForgeError::RepoNotFound(_) | ForgeError::PrNotFound(_) | ForgeError::Auth { .. } | ForgeError::Config(_) => input(e),
            ForgeError::RateLimited(_) | ForgeError::Network { .. } | ForgeError::Http { .. } | ForgeError::Malformed { .. } => backend(e),
        }
    }
}

/// Attaches a message and classifies the error as input.
pub trait InputContext<T> {
    fn input_ctx(self, msg: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> InputContext<T> for Result<T, E> {
    fn input_ctx(self, msg: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Input(e.into().context(msg())))
    }
}
