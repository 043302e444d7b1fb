use thiserror::Error;

/// Error classes surfaced by the library. The CLI prints [`Error::class`] as
/// the machine-parseable prefix of its single-line error report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("structural error: {0}")]
    Structure(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("resize-contract error: {0}")]
    Resize(String),
    #[error("sequence-length error: {len} tokens exceeds max_seq {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss diverged at step {step} (task {task})")]
    Divergence { step: usize, task: String },
    #[error("lineage error: {0}")]
    Lineage(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "dimension",
            Error::Structure(_) => "structural",
            Error::Config(_) => "configuration",
            Error::Contract(_) => "contract",
            Error::Resize(_) => "resize-contract",
            Error::SequenceLength { .. } => "sequence-length",
            Error::NonFinite { .. } => "non-finite",
            Error::Divergence { .. } => "divergence",
            Error::Lineage(_) => "lineage",
            Error::Integrity(_) => "integrity",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
