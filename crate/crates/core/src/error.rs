//! Error taxonomy. Configuration problems are separated from runtime
//! failures so the CLI can map them to distinct exit codes.

#[derive(Debug, thiserror::Error)]
pub enum ReplanError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] replan_nn::NnError),
}

pub type Result<T> = std::result::Result<T, ReplanError>;

impl ReplanError {
    /// True for errors a user fixes by changing config or flags.
    pub fn is_config(&self) -> bool {
        matches!(self, ReplanError::Config(_))
    }
}
