use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("unknown flow format `{0}` (expected `canonical` or `binetflow`)")]
    UnknownFormat(String),

    #[error("no parseable flow records ({malformed} malformed lines)")]
    EmptyAfterParse { malformed: usize },

    #[error("invalid window parameters: window_len={window_len}, stride={stride}")]
    InvalidWindow { window_len: f64, stride: f64 },

    #[error("window contains no records")]
    EmptyWindow,

    #[error("no flow features for endpoint `{0}`")]
    MissingFeatures(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("model is frozen; gradients are not available")]
    FrozenModel,

    #[error("training mask selects no nodes")]
    EmptyMask,

    #[error("corrupt model payload: {0}")]
    CorruptPayload(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid synthetic graph spec: {0}")]
    InvalidSpec(String),

    #[error("infeasible k-regular mesh: k={k}, n_bots={n_bots}")]
    InfeasibleMesh { k: usize, n_bots: usize },

    #[error("graph schema violation: {0}")]
    Schema(String),

    #[error("graph has no node labels: {0}")]
    MissingLabels(String),

    #[error("too few samples for stratification: {0}")]
    Stratification(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no input: {0}")]
    EmptyInput(&'static str),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
