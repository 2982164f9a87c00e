use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({lat:.6}, {lon:.6}) falls outside the grid (col {col}, row {row})")]
    OutOfBounds { lat: f64, lon: f64, col: i64, row: i64 },

    #[error("trajectory for agent {0:?} has no points")]
    EmptyTrajectory(String),

    #[error("trajectory for agent {agent_id:?} is not strictly increasing in time at fix {index}")]
    UnsortedTrajectory { agent_id: String, index: usize },

    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("need at least {k} points to fit {k} clusters, got {n}")]
    TooFewPoints { n: usize, k: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },

    #[error("unknown context mode {0:?}")]
    UnknownMode(String),

    #[error("no score records supplied")]
    EmptyInput,

    #[error("labels are degenerate: need at least one positive and one negative")]
    DegenerateLabels,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}:{record}: {message}", path.display())]
    Parse { path: PathBuf, record: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Validation errors are caused by bad input rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::OutOfBounds { .. }
                | Error::EmptyTrajectory(_)
                | Error::UnsortedTrajectory { .. }
                | Error::InvalidCoordinate(_)
                | Error::TooFewPoints { .. }
                | Error::ShapeMismatch(_)
                | Error::UnknownMode(_)
                | Error::EmptyInput
                | Error::DegenerateLabels
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::Checkpoint(_)
        )
    }
}
