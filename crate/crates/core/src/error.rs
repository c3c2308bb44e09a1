use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid corpus spec: {0}")]
    CorpusSpec(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate example id `{0}`")]
    DuplicateId(String),

    #[error("invalid joint distribution: {0}")]
    JointSpec(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("insufficient pool for cell (language {language}, label {label}): need {needed}, have {available}")]
    InsufficientPool {
        language: usize,
        label: usize,
        needed: usize,
        available: usize,
    },

    #[error("invalid token id {token} (vocabulary size {vocab_size})")]
    InvalidToken { token: u32, vocab_size: usize },

    #[error("position {position} out of range for input of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("weight undefined for empty cell (language {language}, label {label})")]
    ZeroCount { language: usize, label: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("input of length {len} exceeds exact Shapley limit {limit}; use the sampled engine")]
    TooLongForExact { len: usize, limit: usize },

    #[error("probe: {0}")]
    Probe(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::CorpusSpec(_) => "corpus_spec",
            Error::Parse { .. } => "parse",
            Error::DuplicateId(_) => "duplicate_id",
            Error::JointSpec(_) => "joint_spec",
            Error::Sampling(_) => "sampling",
            Error::InsufficientPool { .. } => "insufficient_pool",
            Error::InvalidToken { .. } => "invalid_token",
            Error::PositionOutOfRange { .. } => "position_out_of_range",
            Error::Empty(_) => "empty",
            Error::Checkpoint(_) => "checkpoint",
            Error::VocabMismatch(_) => "vocab_mismatch",
            Error::ZeroCount { .. } => "zero_count",
            Error::Divergence { .. } => "divergence",
            Error::TooLongForExact { .. } => "too_long_for_exact",
            Error::Probe(_) => "probe",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// The file involved, when there is one.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Parse { path, .. } | Error::Io { path, .. } => Some(path),
            _ => None,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
