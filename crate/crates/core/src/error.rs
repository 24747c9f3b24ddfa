use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or labels disagree with the model / dataset schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// The caller asked for something the operation does not support.
    #[error("usage error: {0}")]
    Usage(String),

    /// An iterative solver or the trainer stopped before reaching tolerance.
    #[error("{stage} did not converge (residual {residual:e} after {iters} iterations)")]
    Convergence {
        stage: &'static str,
        residual: f64,
        iters: usize,
    },

    /// A data file row failed to parse or violated the schema.
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
