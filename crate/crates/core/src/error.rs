use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no events")]
    NoEvents,
    #[error("invalid grid: J and t_max must be positive")]
    InvalidGrid,
    #[error("nonpositive time for subject {id}")]
    NonPositiveTime { id: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite linear predictor at row {row}")]
    NonFinitePredictor { row: usize },
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("fitting failed: {0}")]
    Fit(String),
    #[error("training diverged at epoch {epoch}: validation nll = {value}")]
    Diverged { epoch: usize, value: f64 },
    #[error("subject {id} has no point cloud")]
    MissingCloud { id: u64 },
    #[error("no mass: censoring weight is zero for every usable subject")]
    NoMass,
    #[error("no event times below horizon {tau}")]
    NoEventTimes { tau: f64 },
    #[error("reference IBS must be positive")]
    ZeroReference,
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures of the numerical procedures themselves (as opposed to bad input or I/O).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinitePredictor { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Fit(_)
                | Error::Diverged { .. }
                | Error::NoMass
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
