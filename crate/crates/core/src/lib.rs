//! A page-oriented storage engine with REDO-only recovery.
//!
//! Transactions keep their log records in private, volatile logs until
//! commit. Only committed work ever reaches the persistent log, so restart
//! consists of a REDO pass and never undoes anything.

pub mod buffer;
pub mod engine;
pub mod error;
pub mod locks;
pub mod log;
pub mod page;
pub mod plog;
pub mod propagation;
pub mod recovery;
pub mod sim;
pub mod snapshot;
pub mod store;
pub mod txn;
pub mod vlm;

pub use engine::{Engine, EngineConfig, EngineObserver, Phase, StatsSnapshot};
pub use error::{DiskError, EngineError, Result};
pub use log::{LogRecord, LogRecordType, Lsn, PageId, TxnId, Vlsn};
pub use plog::CommitReceipt;
pub use sim::disk::{FaultPlan, VirtualDisk};
pub use snapshot::Snapshot;
pub use store::RecordId;
pub use txn::{Transaction, TxnKind};
