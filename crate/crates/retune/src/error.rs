use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("input too short: need at least {needed} samples (one receptive field), got {got}")]
    InputTooShort { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sample rate mismatch: audio is {audio_hz} Hz but the model expects {model_hz} Hz")]
    RateMismatch { audio_hz: u32, model_hz: u32 },

    #[error(
        "fewer than K+1 masked frames ({masked} masked, K={k}): lower K or raise the mask start probability p"
    )]
    TooFewMaskedFrames { masked: usize, k: usize },

    #[error("model is in pre-training configuration: no output head attached")]
    NoOutputHead,

    #[error("surgery not applicable: {0}")]
    Surgery(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("wav parse error in field `{field}`: {reason}")]
    WavParse { field: String, reason: String },

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: u64, reason: String },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
