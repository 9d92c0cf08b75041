use thiserror::Error;

/// Command failure, mapped to the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<netgrow::Error> for CliError {
    fn from(e: netgrow::Error) -> Self {
        use netgrow::Error as E;
        let message = e.to_string();
        match e {
            E::InvalidParameter(_) => CliError::Usage(message),
            E::InvalidLabel { .. }
            | E::UndefinedNormalization
            | E::Parse { .. }
            | E::Ingestion(_) => CliError::Data(message),
            E::DegenerateModel { .. }
            | E::FitFailure { .. }
            | E::Capacity { .. }
            | E::MissingState { .. }
            | E::DegenerateBatch
            | E::Inconsistent { .. }
            | E::TrainingFailure { .. } => CliError::Numerical(message),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
