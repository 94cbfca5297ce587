use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("`{0}` is not a language-code token")]
    NotALanguageCode(String),

    #[error("source of {len} frames exceeds max_src_len {max}")]
    SourceTooLong { len: usize, max: usize },

    #[error("target of {len} tokens exceeds max_tgt_len {max}")]
    TargetTooLong { len: usize, max: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("adapter error: {0}")]
    Adapter(String),

    #[error("misaligned parameter sets: {0}")]
    Misaligned(String),

    #[error("zero trace: {0}")]
    ZeroTrace(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("character {ch:?} is not in the alphabet of language {lang}")]
    OutOfAlphabet { ch: char, lang: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("configuration conflict: {0}")]
    ConfigConflict(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for a front end: 2 input error, 3 config conflict,
    /// 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigConflict(_) => 3,
            Error::NonFinite(_) => 4,
            _ => 2,
        }
    }
}
