use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("out-of-bounds tensor '{0}'")]
    OutOfBounds(String),

    #[error("overlapping data ranges for tensor '{0}'")]
    Overlap(String),

    #[error("unsupported dtype '{dtype}' for tensor '{name}'")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("invalid tensor '{name}': {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("container size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("shape mismatch{}: {left:?} vs {right:?}", key_suffix(.key))]
    ShapeMismatch {
        key: Option<String>,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("key '{key}' missing from {what}")]
    MissingKey { key: String, what: String },

    #[error("no tensors in common between tuned and base checkpoints")]
    EmptyIntersection,

    #[error("base fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("unknown donor '{0}'")]
    UnknownDonor(String),

    #[error("invalid routing pattern '{pattern}': {reason}")]
    BadPattern { pattern: String, reason: String },

    #[error("width mismatch for layer '{layer}': expected {expected}, got {got}")]
    WidthMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },

    #[error("unknown layer '{0}'")]
    UnknownLayer(String),

    #[error("no calibration coverage for layer '{0}'")]
    NoCoverage(String),

    #[error("no calibration coverage: dataset is empty")]
    EmptyCalibration,

    #[error("missing saliency for tensor '{0}'")]
    MissingSaliency(String),

    #[error("missing lambda for donor '{0}'")]
    MissingLambda(String),

    #[error("density {0} outside (0, 1]")]
    BadDensity(f64),

    #[error("invalid stats file: {0}")]
    BadStats(String),

    #[error("invalid model: {0}")]
    BadModel(String),

    #[error("invalid calibration data at line {line}: {reason}")]
    BadCalibration { line: usize, reason: String },

    #[error("invalid plant spec: {0}")]
    BadPlantSpec(String),

    #[error("recipe validation failed:\n{}", .0.join("\n"))]
    Recipe(Vec<String>),
}

fn key_suffix(key: &Option<String>) -> String {
    match key {
        Some(k) => format!(" for '{k}'"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation-class errors: inputs that are well-formed files but do not
    /// fit together (shapes, keys, recipe fields). Everything else is a
    /// runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::MissingKey { .. }
                | Error::EmptyIntersection
                | Error::FingerprintMismatch { .. }
                | Error::UnknownDonor(_)
                | Error::BadPattern { .. }
                | Error::WidthMismatch { .. }
                | Error::UnknownLayer(_)
                | Error::MissingSaliency(_)
                | Error::MissingLambda(_)
                | Error::BadDensity(_)
                | Error::BadPlantSpec(_)
                | Error::Recipe(_)
        )
    }
}
