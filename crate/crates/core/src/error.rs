use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` not found in CSV header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: bad value `{value}`")]
    BadValue {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: external control (S=0) is marked treated (A=1)")]
    EcTreated { row: usize },

    #[error("group `{0}` is empty")]
    EmptyGroup(&'static str),

    #[error("too few rows for fit: need {needed}, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("logistic labels take a single value")]
    OneClass,

    #[error("too few randomized controls for conformal scoring: need {needed}, got {got}")]
    TooFewControls { needed: usize, got: usize },

    #[error("invalid fold count {folds} for {controls} randomized controls")]
    BadFoldCount { folds: usize, controls: usize },

    #[error("enumeration over {n_rct} randomized units exceeds the 2^{max} budget")]
    TooLarge { n_rct: usize, max: usize },

    #[error("statistic failed on resample {resample} after redraw budget: {reason}")]
    StatisticFailed { resample: usize, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{failed} of {total} replications failed (limit 1%): first error: {first}")]
    ReplicationFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) => "MissingColumn",
            Error::BadValue { .. } => "BadValue",
            Error::EcTreated { .. } => "EcTreated",
            Error::EmptyGroup(_) => "EmptyGroup",
            Error::TooFewRows { .. } => "TooFewRows",
            Error::OneClass => "OneClass",
            Error::TooFewControls { .. } => "TooFewControls",
            Error::BadFoldCount { .. } => "BadFoldCount",
            Error::TooLarge { .. } => "TooLarge",
            Error::StatisticFailed { .. } => "StatisticFailed",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::ReplicationFailures { .. } => "ReplicationFailures",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
        }
    }
}
