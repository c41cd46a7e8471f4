use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("state error: {0}")]
    State(String),
    #[error("action {action} out of range 0..{num_actions}")]
    Action { action: usize, num_actions: usize },
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short category name, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numerical(_) => "numerical",
            Error::State(_) => "state",
            Error::Action { .. } => "action",
            Error::Distribution(_) => "distribution",
            Error::Config(_) => "config",
            Error::DegenerateBatch(_) => "degenerate-batch",
            Error::Schema(_) => "schema",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
