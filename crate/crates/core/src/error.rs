use thiserror::Error;

use crate::log::{Lsn, PageId, TxnId};
use crate::store::RecordId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiskError {
    #[error("virtual disk crashed")]
    Crashed,
    #[error("page {0} does not exist on disk")]
    NoSuchPage(PageId),
    #[error("log write at {offset} beyond end {end}")]
    LogGap { offset: u64, end: u64 },
    #[error("log write at {offset} below synced watermark {synced}")]
    SyncedOverwrite { offset: u64, synced: u64 },
    #[error("log read [{offset}, +{len}) out of range")]
    LogRange { offset: u64, len: usize },
    #[error("disk image: {0}")]
    Image(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    /// The engine hit a failed write or sync and stopped; only restart helps.
    #[error("engine crashed")]
    Crashed,
    #[error("engine is shut down")]
    ShutDown,
    #[error("engine is recovering; new transactions are refused")]
    Recovering,
    #[error(transparent)]
    Disk(#[from] DiskError),
    #[error("log encoding: {0}")]
    Encoding(String),
    #[error("resource exhausted: {0}")]
    ResourceExhausted(&'static str),
    #[error("illegal state: {0}")]
    IllegalState(String),
    #[error("{txn} timed out waiting for a lock on {rid}")]
    LockTimeout { txn: TxnId, rid: RecordId },
    #[error("record {0} not found")]
    NotFound(RecordId),
    #[error("page {0} not found")]
    PageNotFound(PageId),
    #[error("payload of {0} bytes exceeds the record limit")]
    PayloadTooLarge(usize),
    #[error("unknown savepoint {0:?}")]
    UnknownSavepoint(String),
    #[error("no log record starts at lsn {0}")]
    InvalidLsn(Lsn),
    #[error("integrity violation: {0}")]
    Integrity(String),
}

impl EngineError {
    pub fn illegal(msg: impl Into<String>) -> Self {
        EngineError::IllegalState(msg.into())
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;
