use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite coordinate at sample {sample}, dim {dim}")]
    NonFiniteCoord { sample: usize, dim: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("operator is not Hermitian positive definite: {0}")]
    NotHermitianPd(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("problem too large for exact evaluation: {0}")]
    SizeGuard(String),

    #[error("file format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("hardware limits violated: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

