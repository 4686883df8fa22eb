use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("top_p must lie in (0, 1], got {0}")]
    InvalidTopP(f64),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("ground truth {0:?} does not parse as an answer")]
    MalformedTruth(String),
    #[error("trace list is empty")]
    EmptyTraceList,
    #[error("batch has no supervised positions")]
    EmptyBatch,
    #[error("preferred and dispreferred rollouts condition on different prompts")]
    PromptMismatch,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("group rewards have zero variance")]
    DegenerateGroup,
    #[error("group has no positive-reward rollout")]
    PromptUnusable,
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("example of length {length} exceeds sequence length {capacity}")]
    ExampleTooLong { length: usize, capacity: usize },
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("suite list is empty")]
    EmptySuite,
    #[error("missing stage input: {0}")]
    MissingInput(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
