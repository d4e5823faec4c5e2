use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("channel count {channels} is not divisible by {groups} groups")]
    InvalidGroups { channels: usize, groups: usize },

    #[error("axis {axis} is out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("stride must be at least 1")]
    InvalidStride,

    #[error("invalid output size {0}x{1}")]
    InvalidSize(usize, usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape was already consumed by a backward pass; reset it first")]
    TapeConsumed,

    #[error("degenerate box ({x0}, {y0}, {x1}, {y1})")]
    DegenerateBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("unknown box format `{0}`")]
    UnknownFormat(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("detector has {queries} queries but the scene has {instances} instances")]
    TooFewQueries { queries: usize, instances: usize },

    #[error("invalid query count {n} (available {available})")]
    InvalidN { n: usize, available: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
