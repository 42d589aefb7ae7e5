use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid synthetic dataset spec: {0}")]
    Spec(String),

    #[error("cannot split dataset: slice `{slice}` {reason}")]
    Split { slice: String, reason: String },

    #[error("slicing function `{name}` failed on row {row}: {reason}")]
    SfEvaluation {
        name: String,
        row: usize,
        reason: String,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error(
        "training diverged at epoch {epoch}: loss became non-finite (last finite loss {last_finite_loss:?})"
    )]
    Diverged {
        epoch: usize,
        last_finite_loss: Option<f64>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
