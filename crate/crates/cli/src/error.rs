use drf_core::DrfError;

/// Failure classes mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<DrfError> for CliError {
    fn from(e: DrfError) -> Self {
        let msg = e.to_string();
        match e {
            DrfError::Invalid { .. } | DrfError::InfeasibleConfig(_) | DrfError::Shape { .. } => CliError::Config(msg),
            DrfError::DegeneratePotential | DrfError::NonFiniteResidual { .. } | DrfError::NotPositiveDefinite { .. } => {
                CliError::Numerical(msg)
            }
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
