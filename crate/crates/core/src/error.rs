use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("empty axis in {0}")]
    EmptyAxis(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-deterministic function: evaluations {first} and {second} differ")]
    Determinism { first: f64, second: f64 },

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("state used before any training update: {0}")]
    Uninitialized(String),

    #[error("empty evaluation: {0}")]
    EmptyEvaluation(String),

    #[error("insufficient runs: need at least {needed}, got {got}")]
    InsufficientRuns { needed: usize, got: usize },

    #[error("coverage error: missing value for model `{model}` on task `{task}`")]
    Coverage { model: String, task: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
