use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("event {index} lies on or outside the observation window")]
    Boundary { index: usize },

    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("mark value outside its support: {0}")]
    Support(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite log-likelihood at iteration {iteration}, event {event}")]
    NonFinite { iteration: usize, event: usize },

    #[error("improper posterior: {0}")]
    ImproperPosterior(String),

    #[error("intensity {value} exceeds the dominating bound {bound} at {location:?}")]
    DominationViolation {
        value: f64,
        bound: f64,
        location: Vec<f64>,
    },

    #[error("marginal density underflows at location {0:?}")]
    MarginalUnderflow(Vec<f64>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
