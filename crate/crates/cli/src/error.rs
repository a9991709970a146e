use cglb_core::GpError;
use thiserror::Error;

use crate::data::DataError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(DataError),
    #[error("numerical failure: {0}")]
    Numerical(#[from] GpError),
    #[error("gradient check failed: {0}")]
    GradientCheck(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialisation error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Numerical(g) => CliError::Numerical(g),
            other => CliError::Data(other),
        }
    }
}

impl CliError {
    /// 2 for anything wrong with the inputs, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) | CliError::GradientCheck(_) => 3,
            _ => 2,
        }
    }
}
