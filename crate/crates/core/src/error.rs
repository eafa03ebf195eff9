use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid question {id}: {reason}")]
    InvalidQuestion { id: String, reason: String },

    #[error("invalid response: {0}")]
    InvalidResponse(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("referential integrity: {0}")]
    ReferentialIntegrity(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("mean over an empty key set is undefined")]
    EmptyKeys,

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("individual {0} has no usable responses")]
    InsufficientData(String),

    #[error("invalid k = {k} for {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("no individual carries {trait_name} = {category}")]
    EmptyGroup { trait_name: String, category: String },

    #[error("unknown {kind}: {id}")]
    Lookup { kind: &'static str, id: String },

    #[error("question {0} has no answers among the requested members")]
    EmptySupport(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token {0} is not in the vocabulary")]
    Vocab(String),

    #[error("parameters are frozen and cannot be updated")]
    Frozen,

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("prediction and truth keys are not aligned: {0}")]
    Alignment(String),

    #[error("missing prerequisite {path}: run `{producer}` first")]
    Dependency { path: PathBuf, producer: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable, machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidQuestion { .. } => "invalid-question",
            Error::InvalidResponse(_) => "invalid-response",
            Error::Parse { .. } => "parse",
            Error::ReferentialIntegrity(_) => "referential-integrity",
            Error::DegenerateSplit(_) => "degenerate-split",
            Error::Dimension { .. } => "dimension",
            Error::EmptyKeys => "undefined-mean",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::InsufficientData(_) => "insufficient-data",
            Error::InvalidK { .. } => "invalid-k",
            Error::EmptyGroup { .. } => "empty-group",
            Error::Lookup { .. } => "lookup",
            Error::EmptySupport(_) => "empty-support",
            Error::InvalidInput(_) => "invalid-input",
            Error::Vocab(_) => "vocab",
            Error::Frozen => "immutability-violation",
            Error::Incompatible(_) => "incompatibility",
            Error::Alignment(_) => "alignment",
            Error::Dependency { .. } => "dependency",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn lookup(kind: &'static str, id: impl Into<String>) -> Self {
        Error::Lookup { kind, id: id.into() }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual })
    }
}
