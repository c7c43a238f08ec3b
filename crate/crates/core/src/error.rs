use thiserror::Error;

/// Errors produced anywhere in the pruning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged{}: {message}", iteration.map(|k| format!(" at ADMM iteration {k}")).unwrap_or_default())]
    Training {
        iteration: Option<usize>,
        message: String,
    },

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error("accuracy {accuracy:.4} is below the floor {floor:.4} after round {round}")]
    BelowFloor {
        round: usize,
        accuracy: f64,
        floor: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

pub(crate) fn format_err<T>(offset: u64, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset,
        message: msg.into(),
    })
}
