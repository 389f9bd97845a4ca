use std::path::PathBuf;

use gradtape::TapeError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("class '{0}' appears in more than one split")]
    SplitOverlap(String),
    #[error("missing class: {0}")]
    MissingClass(String),
    #[error("class '{class}' has {have} examples, needs at least {need}")]
    InsufficientExamples { class: String, have: usize, need: usize },
    #[error("split has {have} classes, episode needs {need}")]
    InsufficientClasses { have: usize, need: usize },
    #[error("cross-domain mode requires a target-domain dataset")]
    MissingTargetDomain,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("inner-loop adaptation diverged: {0}")]
    AdaptationDiverged(String),
    #[error("policy state mismatch: {0}")]
    StateMismatch(String),
    #[error("degenerate (zero-norm) vector: {0}")]
    DegenerateVector(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("stage {0} is already decoded")]
    AlreadyDecoded(String),
    #[error("unsupported input: {0}")]
    UnsupportedInput(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("nothing to report in {0}")]
    NothingToReport(PathBuf),
    #[error("episode from distribution {got} where {expected} was required")]
    WrongDistribution { expected: String, got: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("reports carry different config hashes ({0}); pass --allow-mixed to combine them")]
    MixedConfigHashes(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<TapeError> for Error {
    fn from(e: TapeError) -> Self {
        match e {
            TapeError::Shape(s) => Error::Shape(s),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
