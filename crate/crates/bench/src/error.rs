use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Failures surfaced by the command line, each with a fixed exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Output(_) => 1,
        }
    }

    /// Classifies an error raised while reading inputs.
    pub fn data(e: tsc::Error) -> Self {
        CliError::Data(e.to_string())
    }

    /// Prefixes the message, keeping the category.
    pub fn context(self, prefix: impl std::fmt::Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{prefix}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{prefix}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{prefix}: {m}")),
            CliError::Output(m) => CliError::Output(format!("{prefix}: {m}")),
        }
    }

    pub fn output(e: impl std::fmt::Display) -> Self {
        CliError::Output(e.to_string())
    }
}

/// Classifies an error raised by training or evaluation.
impl From<tsc::Error> for CliError {
    fn from(e: tsc::Error) -> Self {
        use tsc::Error as E;
        match e {
            E::InvalidArgument(m) => CliError::Config(m),
            E::DimensionMismatch(_) | E::Format(_) | E::Version(_) | E::Consistency(_) | E::Parse { .. } | E::Io(_) => {
                CliError::Data(e.to_string())
            }
            E::ExpOverflow { .. } | E::NonConvergence { .. } | E::Numerical(_) | E::Leaf { .. } | E::Datum { .. } => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}
