use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    #[error("{what} parse error at byte {offset}: {detail}")]
    Parse {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    #[error("wav: expected {expected} channels, file has {found}")]
    WavChannelCount { expected: u16, found: u16 },

    #[error("wav: unsupported format: {0}")]
    WavFormat(String),

    #[error("backward already ran on this graph; build a fresh graph")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached: no tracked tensor contributes to it")]
    DetachedGraph,

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("config line {line}: unknown key `{key}`")]
    UnknownConfigKey { line: usize, key: String },

    #[error("config line {line}: {detail}")]
    BadConfigValue { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArg {
            op,
            detail: detail.into(),
        }
    }
}
