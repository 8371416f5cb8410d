//! Stable exit codes and the error type that carries them.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Internal = 1,
    Usage = 2,
    Io = 3,
    Divergence = 4,
    Incompatible = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(code: ExitCode, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn context(self, message: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self {
            code: self.code,
            error: self.error.context(message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub fn usage(message: impl fmt::Display) -> CliError {
    CliError::new(ExitCode::Usage, anyhow::anyhow!("{message}"))
}

pub fn incompatible(message: impl fmt::Display) -> CliError {
    CliError::new(ExitCode::Incompatible, anyhow::anyhow!("{message}"))
}

pub fn code_for(e: &acacr::Error) -> ExitCode {
    use acacr::Error as E;
    match e {
        E::InvalidArgument(_) | E::Divisibility { .. } => ExitCode::Usage,
        E::Io { .. } | E::Image(_) | E::Format { .. } | E::Json(_) => ExitCode::Io,
        E::NonFinite { .. } | E::Divergence { .. } => ExitCode::Divergence,
        E::Incompatible(_) | E::Shape { .. } => ExitCode::Incompatible,
        E::Backward(_) => ExitCode::Internal,
    }
}

impl From<acacr::Error> for CliError {
    fn from(e: acacr::Error) -> Self {
        Self::new(code_for(&e), e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ExitCode::Io, e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ExitCode::Io, e)
    }
}

/// Attaches a message to any error convertible into [`CliError`].
pub trait Context<T> {
    fn ctx(self, message: impl fmt::Display + Send + Sync + 'static) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn ctx(self, message: impl fmt::Display + Send + Sync + 'static) -> CliResult<T> {
        self.map_err(|e| e.into().context(message))
    }
}
