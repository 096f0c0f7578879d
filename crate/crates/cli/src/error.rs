use std::path::PathBuf;

/// Failures split by exit status: bad input is a validation error (2),
/// anything that goes wrong while processing valid input is a runtime error (1).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: diaruq::Error },
    #[error(transparent)]
    Core(#[from] diaruq::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_)
            | CliError::MissingInput(_)
            | CliError::Config { .. }
            | CliError::Input { .. } => 2,
            CliError::Core(e) if !matches!(e, diaruq::Error::Io(_)) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn input(path: impl Into<PathBuf>) -> impl FnOnce(diaruq::Error) -> Self {
        let path = path.into();
        move |source| CliError::Input { path, source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
