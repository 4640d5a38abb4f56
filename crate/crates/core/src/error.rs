use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid interval: dt = {0} (must be > 0)")]
    InvalidInterval(f64),

    #[error("warm-up incomplete: need {needed} distinct samples, have {got}")]
    WarmupIncomplete { needed: usize, got: usize },

    #[error("degenerate cluster: mode {0} has no members")]
    DegenerateCluster(usize),

    #[error("degenerate dwell: mode {0} has jumps but zero dwell time")]
    DegenerateDwell(usize),

    #[error("hazard set unreachable from modes {0:?}")]
    UnreachableHazard(Vec<usize>),

    #[error("invalid prior: mode probabilities are all zero")]
    InvalidPrior,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input error at line {line}: {msg}")]
    Input { line: usize, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed input files or configuration.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Input { .. } | Error::InvalidConfig(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_)
        )
    }
}
