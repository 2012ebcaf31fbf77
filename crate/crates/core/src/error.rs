use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("K = {k} must satisfy 1 <= K <= N = {n}")]
    InvalidK { k: usize, n: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid bias spec: {0}")]
    InvalidBiasSpec(String),

    #[error("{path}: row {row}: {msg}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("{0}: dataset is empty")]
    EmptyDataset(PathBuf),

    #[error("data error: {0}")]
    Data(String),

    #[error("unknown metric `{0}` (expected one of: accuracy, loss, rank)")]
    UnknownMetric(String),

    #[error("runs were evaluated on different datasets ({0} vs {1})")]
    MismatchedDatasets(String, String),

    #[error("epoch {epoch}, batch {batch}: {source}")]
    Train {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Train { source, .. } => source.exit_code(),
            Error::NonFinite(_) => 3,
            Error::Config(_) | Error::UnknownMetric(_) | Error::InvalidK { .. } => 1,
            _ => 2,
        }
    }
}
