use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GrpError>;

#[derive(Debug, Error)]
pub enum GrpError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("fit error: {message} (residual {residual:e})")]
    Fit { message: String, residual: f64 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GrpError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        GrpError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        GrpError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GrpError::Io {
            path: path.into(),
            source,
        }
    }
}

impl GrpError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            GrpError::Dimension(_) => "dimension",
            GrpError::Config(_) => "config",
            GrpError::Domain(_) => "domain",
            GrpError::Numeric(_) => "numeric",
            GrpError::Data(_) => "data",
            GrpError::Fit { .. } => "fit",
            GrpError::Eval(_) => "eval",
            GrpError::Io { .. } => "io",
        }
    }
}
