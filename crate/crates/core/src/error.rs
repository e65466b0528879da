use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),

    #[error("clip too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token {token} out of range for codebook size {codebook_size}")]
    TokenRange { token: u32, codebook_size: usize },

    #[error("normalization undefined: zero projected vector at stage {stage}")]
    ZeroVector { stage: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}")]
    Magic { expected: &'static str },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file")]
    Truncated,

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("frozen quantizer")]
    Frozen,

    #[error("insufficient frames: have {have}, need {need}")]
    InsufficientFrames { have: usize, need: usize },

    #[error("no masked frames")]
    NoMaskedFrames,

    #[error("insufficient negatives: batch of {0}, need at least 2")]
    InsufficientNegatives(usize),

    #[error("layer {layer} out of range 0..={max}")]
    LayerRange { layer: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
