use std::path::PathBuf;

/// Errors produced anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward called on a tape that was already consumed")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("mean over zero positions is undefined: {0}")]
    UndefinedMean(&'static str),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: validation loss is {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("unknown module group `{0}`")]
    UnknownGroup(String),

    #[error("corpus has {have} training tokens, need at least {need}")]
    InsufficientTokens { need: usize, have: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no learning rate tuned for batch size {0}; pass the learning rate explicitly")]
    UnlistedBatchSize(usize),

    #[error("quantization precision must be in 1..=32 bits, got {0}")]
    InvalidBits(u32),

    #[error("packed index buffer has {actual} bytes, expected {expected}")]
    CorruptPacked { expected: usize, actual: usize },

    #[error("invalid sparsity target {target}: {reason}")]
    InvalidSparsity { target: f64, reason: &'static str },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("{path}:{line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
