use thiserror::Error;

/// Every failure the library can report. The variant names double as the
/// machine-readable error kind printed by the command-line tool.
#[derive(Debug, Error)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Size(_) => "size",
            Error::Shape(_) => "shape",
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Label(_) => "label",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Training(_) => "training",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
