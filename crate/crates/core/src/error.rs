use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input stream `{source_id}`")]
    EmptyInput { source_id: String },

    #[error("byte stream of length {len} is not a multiple of the row width {width}")]
    NotAligned { len: usize, width: usize },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("manifest row {row} (`{path}`) has an empty family name")]
    UnknownFamily { row: usize, path: String },

    #[error("duplicate source id `{0}`")]
    DuplicateSource(String),

    #[error("family `{family}` has {count} sample(s); at least 2 are required")]
    FamilyTooSmall { family: String, count: usize },

    #[error("invalid specification: {0}")]
    BadSpec(String),

    #[error("invalid config `{key}`: {reason}")]
    BadConfig { key: String, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("batch length mismatch: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("non-finite loss at step {step} (ce={ce}, d2v={d2v})")]
    NonFiniteLoss { step: u64, ce: f64, d2v: f64 },

    #[error("parameter sets differ structurally: {0}")]
    StructuralMismatch(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("external projector failed (exit status {}): {stderr}", .status.map_or("none".to_string(), |c| c.to_string()))]
    ExternalToolFailure { status: Option<i32>, stderr: String },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("reference table is empty")]
    EmptyReference,

    #[error("malformed file {}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint write failed ({source}); last good checkpoint: {}", .last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    CheckpointWrite {
        #[source]
        source: std::io::Error,
        last_good: Option<PathBuf>,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::BadConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::BadSpec(_)
                | Error::BadConfig { .. }
                | Error::UnknownFamily { .. }
                | Error::DuplicateSource(_)
                | Error::FamilyTooSmall { .. }
                | Error::MissingFile(_)
                | Error::EmptyInput { .. }
                | Error::DegenerateLabels(_)
                | Error::TooFewRows { .. }
        )
    }
}
