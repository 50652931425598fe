use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TpsError>;

#[derive(Debug, Error)]
pub enum TpsError {
    #[error("vector norm {norm:e} is at or below the normalization epsilon{}", row_suffix(*.row))]
    ZeroNorm { row: Option<usize>, norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("class mismatch: {0}")]
    ClassMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid k = {k} for {n} views")]
    InvalidK { k: usize, n: usize },

    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: format error at byte {offset}: {msg}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("{}: row {row} has norm {norm} (expected unit norm)", path.display())]
    Norm { path: PathBuf, row: usize, norm: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("manifest: {0}")]
    Manifest(String),
}

fn row_suffix(row: Option<usize>) -> String {
    match row {
        Some(r) => format!(" (row {r})"),
        None => String::new(),
    }
}

impl TpsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TpsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: format problems exit 3, numeric
    /// problems exit 4, configuration problems exit 2, anything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            TpsError::Format { .. }
            | TpsError::Norm { .. }
            | TpsError::Json { .. }
            | TpsError::Manifest(_)
            | TpsError::ClassMismatch(_) => 3,
            TpsError::ZeroNorm { .. }
            | TpsError::NonFinite(_)
            | TpsError::DimMismatch { .. }
            | TpsError::ShapeMismatch(_)
            | TpsError::InvalidK { .. }
            | TpsError::InvalidStep(_)
            | TpsError::EmptyInput(_) => 4,
            TpsError::Config(_) => 2,
            TpsError::Io { .. } => 1,
        }
    }
}
