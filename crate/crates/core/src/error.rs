use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Cholesky failed; `pivot` is the first row whose pivot was not positive.
    #[error("matrix is not positive definite (failed at pivot {pivot}, value {value:e})")]
    Factorization { pivot: usize, value: f64 },

    #[error("invalid flow parameters: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {message} (residual {residual:e})")]
    Numerical { message: String, residual: f64 },

    /// Objective returned a non-finite value; the parameter snapshot is attached.
    #[error("objective evaluated to {value} at a parameter vector of length {}", snapshot.len())]
    Evaluation { value: f64, snapshot: Vec<f64> },

    #[error("fit failed: {message}")]
    Fit { message: String, trace: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error("all columns were removed during preprocessing")]
    EmptyDesign,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run directory does not match its manifest: {0}")]
    ManifestMismatch(String),

    #[error("unsupported for this fit method: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
