use doublepass_core::ensemble::EnsembleError;
use doublepass_core::estimation::EstimationError;
use doublepass_core::{FilterError, SdeError, SpinError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Verify(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

impl From<SpinError> for CliError {
    fn from(e: SpinError) -> Self {
        match e {
            SpinError::InvalidSpin(_) | SpinError::DimensionTooLarge { .. } => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SdeError> for CliError {
    fn from(e: SdeError) -> Self {
        match e {
            SdeError::InvalidStep(_) => CliError::Config(e.to_string()),
            SdeError::NonFinite(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Spin(s) => s.into(),
            FilterError::Sde(s) => s.into(),
            FilterError::InvalidParams(_) => CliError::Config(e.to_string()),
            FilterError::Io(io) => CliError::Io(io),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::Filter(f) => f.into(),
            EstimationError::Spin(s) => s.into(),
            EstimationError::Sde(s) => s.into(),
            EstimationError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::InvalidConfig(_) => CliError::Config(e.to_string()),
            EnsembleError::Estimation(inner) => inner.into(),
            EnsembleError::Pool(_) => CliError::Other(anyhow::anyhow!(e.to_string())),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
