use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity exceeded: {what} has {size} entries, limit is {limit}")]
    Capacity {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("concrete score undefined: {0}")]
    UndefinedScore(String),

    #[error("outside loss domain: {0}")]
    Domain(String),

    #[error("reverse integration unstable: probability {value:e} at state {state}")]
    Instability { state: usize, value: f64 },

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("non-finite loss at step {step} (batch hash {batch_hash:016x})")]
    NumericalAbort { step: u64, batch_hash: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus ingestion failed: {0}")]
    Ingestion(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Distinct failure modes when reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u8, expected: u8 },
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("file truncated")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
