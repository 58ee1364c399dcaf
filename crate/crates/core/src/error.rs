use thiserror::Error;

/// Errors raised while validating inputs or running an analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("study {index} ({id}): {reason}")]
    InvalidStudy {
        index: usize,
        id: String,
        reason: String,
    },

    #[error("no informative studies: every study has zero events in both arms")]
    NoInformativeStudies,

    #[error(
        "only {k} informative stud{} (minimum {min}); exact random-effects inference \
         from so few studies is not recommended, lower the minimum explicitly to proceed",
        if *k == 1 { "y" } else { "ies" }
    )]
    TooFewStudies { k: usize, min: usize },

    #[error("study {index} is unbalanced (n1 = {n1}, n2 = {n2}); use the weighted estimator")]
    Unbalanced { index: usize, n1: u64, n2: u64 },

    #[error("{what} = {value} is outside its domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("degenerate random effect: nu = 0 has no finite beta shape parameters")]
    PointMass,

    #[error("{method}: {reason}")]
    Pooling {
        method: &'static str,
        reason: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 for input/validation problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::PointMass | Error::Pooling { .. } | Error::Domain { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
