use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] granu::Error),
    #[error("{0}")]
    Usage(String),
    #[error("training failed: {0}")]
    Train(String),
}

impl CliError {
    /// 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(granu::Error::Io(_)) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(granu::Error::Io(e))
    }
}

impl From<granu::trainer::TrainError> for CliError {
    fn from(e: granu::trainer::TrainError) -> Self {
        match e {
            granu::trainer::TrainError::Setup(e) => CliError::Core(e),
            d => CliError::Train(d.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
