use std::path::PathBuf;

use crate::model::{DeviceId, ExpertId, SeqId, TokenId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("bad override `{0}`: {1}")]
    BadOverride(String, String),

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("batch of {tokens} tokens exceeds cluster capacity {capacity} ({devices} devices x {per_device})")]
    CapacityOverflow {
        tokens: usize,
        capacity: usize,
        devices: usize,
        per_device: usize,
    },

    #[error("migration planning failed: no device can hold {unplaced:?} (seq_id, length) under capacity {capacity}")]
    Planning {
        unplaced: Vec<(SeqId, usize)>,
        capacity: usize,
    },

    #[error("token copy ({0}, expert {1}) has no output location")]
    UnknownCopy(TokenId, ExpertId),

    #[error("device {0} out of range")]
    UnknownDevice(DeviceId),

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("initial loss must be positive, got {0}")]
    NonPositiveLoss(f64),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error("trace contains no sequences")]
    EmptyTrace,

    #[error("no reports to write")]
    EmptyReports,

    #[error("cannot summarize: {0}")]
    Summary(String),

    #[error("strategies ran on different batch seeds: {0}")]
    SeedMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by user input (config files, overrides, flags) rather
    /// than by the simulation itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::BadOverride(..)
                | Error::UnknownStrategy(_)
                | Error::ConfigParse(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
