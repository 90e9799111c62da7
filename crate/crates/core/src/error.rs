use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer {index} (`{name}`): {source}")]
    AtLayer {
        index: usize,
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("blob `{blob}` for tensor `{tensor}`: expected {expected} bytes, found {found}")]
    BlobLength {
        tensor: String,
        blob: String,
        expected: usize,
        found: usize,
    },

    #[error("checksum mismatch for blob `{blob}`: manifest says {expected}, computed {found}")]
    Checksum {
        blob: String,
        expected: String,
        found: String,
    },

    #[error("dangling blob reference `{0}`")]
    DanglingBlob(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid prune decision: {0}")]
    Decision(String),

    #[error("budget infeasible at plan position {position}: lower bound {lower:.6} exceeds p_max {p_max:.6}")]
    BudgetInfeasible { position: usize, lower: f64, p_max: f64 },

    #[error("degenerate channel {channel}: {reason}")]
    DegenerateChannel { channel: usize, reason: &'static str },

    #[error("no valid reconstruction candidate for pruned channel {0}")]
    NoCandidate(usize),

    #[error("invalid deliver matrix: {0}")]
    DeliverMatrix(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("replay buffer not ready: {have} of {need} transitions")]
    NotReady { have: usize, need: usize },

    #[error("strategy does not match model: {0}")]
    StrategyMismatch(String),

    #[error("unknown policy `{name}` (available: {available})")]
    UnknownPolicy { name: String, available: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_layer(self, index: usize, name: &str) -> Self {
        Error::AtLayer {
            index,
            name: name.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
