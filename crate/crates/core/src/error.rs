use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("environment: {0}")]
    Env(String),

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("group statistics need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),

    #[error("nonzero weight on observation token at position {0}")]
    WeightOnObservation(usize),

    #[error("weight vector has {found} entries, trajectory has {expected} tokens")]
    WeightLength { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),

    #[error("judge transport failure: {0}")]
    JudgeTransport(String),

    #[error("KL penalty enabled but no reference snapshot was supplied")]
    MissingReference,

    #[error("verification failed; see {0}")]
    VerifyFailed(String),

    #[error("invalid trajectory: {0}")]
    Trajectory(String),

    #[error("line {line}: {msg}")]
    Record { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
