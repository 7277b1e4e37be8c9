use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry at row {row}, column {col}")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("outcome row {row} is not one-hot (row sum {sum})")]
    NotOneHot { row: usize, sum: f64 },
    #[error("column {col} has zero sample variance")]
    ZeroVarianceColumn { col: usize },
    #[error("precision matrix for sample {sample} is not positive definite")]
    SingularPrecision { sample: usize },
    #[error("no Monte Carlo draw has indicator {value} for bicluster {k}")]
    DegenerateConditioning { k: usize, value: u8 },
    #[error("Langevin chain produced a non-finite state")]
    NonFiniteState,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
