use std::path::PathBuf;

/// Errors produced by the regression library and its file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("matrix is not symmetric (max |a_ij - a_ji| = {max_dev:e})")]
    Asymmetric { max_dev: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("GLM fit did not converge: {0}")]
    Convergence(String),

    #[error("objective became non-finite at outer iteration {iteration}")]
    NumericalFailure { iteration: usize },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
