use std::path::PathBuf;
use thiserror::Error;

/// Toolkit-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("non-finite input")]
    NonFiniteInput,

    #[error("non-finite gradient in tensor '{0}'")]
    NonFiniteGradient(String),

    #[error("config/spec mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: expected C={expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("input too short: length {got}, need at least {need}")]
    InputTooShort { got: usize, need: usize },

    #[error("channel index {0} out of range 1..={1}")]
    ChannelIndexOutOfRange(usize, usize),

    #[error("silent reference")]
    SilentReference,

    #[error("singular noise covariance at bin {0}")]
    SingularNoiseCovariance(usize),

    #[error("non-Hermitian covariance at bin {bin}: asymmetry {asym:.3e}")]
    NonHermitian { bin: usize, asym: f64 },

    #[error("non-scalar loss: shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("silent source")]
    SilentSource,

    #[error("empty manifest")]
    EmptyManifest,

    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },

    #[error("missing per-channel references for utterance '{0}'")]
    MissingReferences(String),

    #[error("insufficient source files: need {need}, found {found}")]
    InsufficientSources { need: usize, found: usize },

    #[error("malformed wav header at byte offset {offset}: {reason}")]
    MalformedWav { offset: u64, reason: String },

    #[error("unsupported wav encoding: format tag {0}")]
    UnsupportedWavEncoding(u16),

    #[error("unexpected end of data chunk")]
    TruncatedWav,

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
