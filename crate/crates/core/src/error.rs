use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("loss must be a scalar, got shape {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("variable belongs to a different graph")]
    ForeignGraph,

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("step size must be non-negative, got {0}")]
    NegativeStep(f64),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("degenerate input: row {row} of {side} has zero norm")]
    ZeroNorm { side: &'static str, row: usize },

    #[error("batch carries no task labels")]
    MissingLabels,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("insufficient data for language `{language}`: need {needed}, have {available}")]
    InsufficientData {
        language: String,
        needed: usize,
        available: usize,
    },

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid parameter file: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by configuration rather than computation.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Parse { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
