use crate::families::FamilyError;
use crate::splines::SplineError;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error(transparent)]
    Family(#[from] FamilyError),

    #[error(transparent)]
    Spline(#[from] SplineError),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("at least 2 observations are required, got {0}")]
    TooFewRows(usize),

    #[error("R-squared is undefined: explained and residual sums of squares are both zero")]
    DegenerateR2,

    #[error("all {0} draws are degenerate")]
    AllDegenerate(usize),

    #[error("response is constant, total sum of squares is zero")]
    ConstantResponse,

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("invalid sampler configuration: {0}")]
    SamplerConfig(String),

    #[error("{path}: line {line}, column '{column}': {message}")]
    Schema {
        path: String,
        line: u64,
        column: String,
        message: String,
    },

    #[error("unknown model term '{0}'")]
    UnknownTerm(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
