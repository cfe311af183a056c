use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (largest jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid target at row {row}: {value}")]
    InvalidTarget { row: usize, value: f64 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("posterior was fitted at model version {posterior} but model is at version {model}")]
    StalePosterior { posterior: u64, model: u64 },

    #[error("network {index} has degenerate parameters (squared norm {norm_sq:e})")]
    DegenerateParameters { index: usize, norm_sq: f64 },

    #[error("k = {k} exceeds the number of candidates ({available})")]
    KTooLarge { k: usize, available: usize },

    #[error("duplicate interaction pair ({0}, {1})")]
    DuplicatePair(usize, usize),

    #[error("parse error at row {row}, column {col}: {msg}")]
    ParseError { row: usize, col: usize, msg: String },

    #[error("target value {value} at row {row} is not 0 or 1")]
    NonBinaryTarget { row: usize, value: f64 },

    #[error("missing column: {0}")]
    MissingColumn(String),

    #[error("only one class present in labels")]
    SingleClass,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name, used on stderr by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidTarget { .. } => "InvalidTarget",
            Error::Diverged { .. } => "Diverged",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::StalePosterior { .. } => "StalePosterior",
            Error::DegenerateParameters { .. } => "DegenerateParameters",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::DuplicatePair(..) => "DuplicatePair",
            Error::ParseError { .. } => "ParseError",
            Error::NonBinaryTarget { .. } => "NonBinaryTarget",
            Error::MissingColumn(_) => "MissingColumn",
            Error::SingleClass => "SingleClass",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
