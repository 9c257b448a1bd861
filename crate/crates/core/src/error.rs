use std::path::PathBuf;

use rmroute_autograd::{CheckpointError, TensorError};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_sequence_length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown adapter target `{name}`; valid linear layers: {valid}")]
    UnknownTarget { name: String, valid: String },
    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),
    #[error("adapter swap attempted while a scoring call is in flight")]
    AdapterBusy,
    #[error("MoE gate: top-k {k} exceeds {experts} experts")]
    TopK { k: usize, experts: usize },
    #[error("non-finite reward input ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("per-domain training got a mixture of domains: {0:?}")]
    DomainMixture(Vec<String>),
    #[error("router training needs at least two domains, got {0:?}")]
    SingleDomain(Vec<String>),
    #[error("router selected domain `{0}` which has no registered reward model")]
    UnregisteredDomain(String),
    #[error("assembly is `{actual}`, operation needs `{expected}`")]
    WrongAssembly {
        expected: &'static str,
        actual: String,
    },
    #[error("invalid dataset:\n{}", .0.join("\n"))]
    InvalidData(Vec<String>),
    #[error("conversion failed for record {index}: {msg}")]
    Conversion { index: usize, msg: String },
    #[error("experiment cell {method}/seed {seed} failed: {source}")]
    Cell {
        method: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, source: CheckpointError) -> Self {
        Error::Checkpoint {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidData(_)
                | Error::Conversion { .. }
                | Error::EmptyDataset(_)
                | Error::DomainMixture(_)
                | Error::SingleDomain(_)
                | Error::UnknownTarget { .. }
                | Error::TopK { .. }
        )
    }
}
