use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss for example {id}")]
    NonFiniteLoss { id: u64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("selection error: requested {requested} but only {available} positive weights (short by {})", requested - available)]
    Selection { requested: usize, available: usize },

    #[error("selection error: {0}")]
    DegeneratePool(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("procedure error: {0}")]
    Procedure(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => "numeric",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Selection { .. } | Error::DegeneratePool(_) => "selection",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Procedure(_) => "procedure",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
