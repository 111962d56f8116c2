//! Volatile log manager: per-transaction private logs held in fixed-size
//! extents, a global VLSN counter, and the per-page scan that single-page
//! rollback uses to find uncommitted updates.
//!
//! There are no per-page chains in volatile memory. A page's candidates are
//! found by scanning every private log whose StartVLSN lies below the
//! PageVLSN of the copy being rolled back.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, MutexGuard, RwLock};

use crate::error::{EngineError, Result};
use crate::log::{LogRecord, Lsn, PageId, TxnId, Vlsn};

pub const DEFAULT_EXTENT_SIZE: usize = 64 * 1024;
pub const DEFAULT_MAX_EXTENTS: usize = 16 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LogState {
    Active,
    Committing,
    Committed,
    Aborting,
    Aborted,
}

impl LogState {
    pub fn can_become(self, next: LogState) -> bool {
        use LogState::*;
        matches!((self, next), (Active, Committing) | (Committing, Committed) | (Active, Aborting) | (Aborting, Aborted))
    }

    pub fn is_finished(self) -> bool {
        matches!(self, LogState::Committed | LogState::Aborted)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ExtentId(pub u32);

#[derive(Debug)]
pub struct Extent {
    pub id: ExtentId,
    pub capacity: usize,
    pub used: usize,
    pub next: Option<ExtentId>,
    pub owner: TxnId,
}

/// Fixed budget of extents handed out to private logs.
struct ExtentPool {
    capacity: usize,
    in_use: usize,
    next_id: u32,
    recycled: Vec<ExtentId>,
}

impl ExtentPool {
    fn allocate(&mut self) -> Result<ExtentId> {
        if self.in_use >= self.capacity {
            return Err(EngineError::ResourceExhausted("volatile log extents"));
        }
        self.in_use += 1;
        Ok(self.recycled.pop().unwrap_or_else(|| {
            self.next_id += 1;
            ExtentId(self.next_id - 1)
        }))
    }

    fn free(&mut self, ids: impl IntoIterator<Item = ExtentId>) {
        for id in ids {
            self.in_use -= 1;
            self.recycled.push(id);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LogEntry {
    pub rec: LogRecord,
    pub vlsn: Vlsn,
    /// Set once the entry's effect was removed by abort or partial rollback.
    pub undone: bool,
    /// Set when `rec.lsn` holds the final persistent-log LSN.
    pub lsn_final: bool,
}

pub struct LogInner {
    pub state: LogState,
    pub entries: Vec<LogEntry>,
    pub extents: Vec<Extent>,
    local_end: u64,
}

impl LogInner {
    fn tail(&mut self) -> &mut Extent {
        self.extents.last_mut().expect("a private log always owns an extent")
    }

    pub fn live_entries(&self) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter().filter(|e| !e.undone)
    }
}

pub struct PrivateLog {
    pub txn_id: TxnId,
    pub start_vlsn: Vlsn,
    inner: Mutex<LogInner>,
}

impl PrivateLog {
    /// The per-log latch.
    pub fn lock(&self) -> MutexGuard<'_, LogInner> {
        self.inner.lock()
    }

    pub fn state(&self) -> LogState {
        self.inner.lock().state
    }
}

/// One candidate for single-page rollback.
#[derive(Clone, Debug)]
pub struct UndoCandidate {
    pub rec: LogRecord,
    pub vlsn: Vlsn,
    pub state: LogState,
    pub undone: bool,
    pub lsn_final: bool,
}

pub struct VolatileLogManager {
    counter: AtomicU64,
    registry: RwLock<BTreeMap<TxnId, Arc<PrivateLog>>>,
    pool: Mutex<ExtentPool>,
    extent_size: usize,
    shutdown: Mutex<bool>,
    shutdown_cv: Condvar,
}

impl VolatileLogManager {
    pub fn new(extent_size: usize, max_extents: usize) -> Self {
        VolatileLogManager {
            counter: AtomicU64::new(0),
            registry: RwLock::new(BTreeMap::new()),
            pool: Mutex::new(ExtentPool { capacity: max_extents, in_use: 0, next_id: 0, recycled: Vec::new() }),
            extent_size,
            shutdown: Mutex::new(false),
            shutdown_cv: Condvar::new(),
        }
    }

    pub fn current_vlsn(&self) -> Vlsn {
        Vlsn(self.counter.load(Ordering::SeqCst))
    }

    pub fn extents_in_use(&self) -> usize {
        self.pool.lock().in_use
    }

    pub fn open_log(&self, txn_id: TxnId) -> Result<Arc<PrivateLog>> {
        let mut reg = self.registry.write();
        if reg.contains_key(&txn_id) {
            return Err(EngineError::illegal(format!("{txn_id} already has an open log")));
        }
        let ext = self.pool.lock().allocate()?;
        let log = Arc::new(PrivateLog {
            txn_id,
            // Read under the registry latch so a scanner holding a registry
            // snapshot never misses a log whose records it must see.
            start_vlsn: self.current_vlsn(),
            inner: Mutex::new(LogInner {
                state: LogState::Active,
                entries: Vec::new(),
                extents: vec![Extent { id: ext, capacity: self.extent_size, used: 0, next: None, owner: txn_id }],
                local_end: 0,
            }),
        });
        reg.insert(txn_id, Arc::clone(&log));
        Ok(log)
    }

    /// Appends a record to an Active log. The record's lsn becomes its local
    /// byte offset in the private log. Page records draw a fresh VLSN, which
    /// the caller stores as the page's PageVLSN while still holding the
    /// page latch.
    pub fn append(&self, log: &PrivateLog, mut rec: LogRecord) -> Result<Vlsn> {
        let mut inner = log.lock();
        if inner.state != LogState::Active {
            return Err(EngineError::illegal(format!("append to {:?} log of {}", inner.state, log.txn_id)));
        }
        let len = rec.encoded_len();
        if len > self.extent_size {
            return Err(EngineError::ResourceExhausted("log record larger than an extent"));
        }
        if inner.tail().used + len > inner.tail().capacity {
            let id = self.pool.lock().allocate()?;
            inner.tail().next = Some(id);
            inner.extents.push(Extent { id, capacity: self.extent_size, used: 0, next: None, owner: log.txn_id });
        }
        inner.tail().used += len;
        rec.lsn = Lsn(inner.local_end);
        inner.local_end += len as u64;
        let vlsn = if rec.page_id.is_null() {
            Vlsn::NONE
        } else {
            Vlsn(self.counter.fetch_add(1, Ordering::SeqCst) + 1)
        };
        rec.vlsn = vlsn;
        inner.entries.push(LogEntry { rec, vlsn, undone: false, lsn_final: false });
        Ok(vlsn)
    }

    /// Every record for `page` with VLSN at most `upper` in a log that has
    /// not been released, newest first.
    pub fn collect_undo_candidates(&self, page: PageId, upper: Vlsn) -> Vec<UndoCandidate> {
        let logs: Vec<Arc<PrivateLog>> = self
            .registry
            .read()
            .values()
            .filter(|l| l.start_vlsn < upper)
            .cloned()
            .collect();
        let mut out = Vec::new();
        for log in logs {
            let inner = log.lock();
            for e in &inner.entries {
                if e.rec.page_id == page && e.vlsn <= upper && e.vlsn != Vlsn::NONE {
                    out.push(UndoCandidate {
                        rec: e.rec.clone(),
                        vlsn: e.vlsn,
                        state: inner.state,
                        undone: e.undone,
                        lsn_final: e.lsn_final,
                    });
                }
            }
        }
        out.sort_by_key(|c| std::cmp::Reverse(c.vlsn));
        out
    }

    /// True if some unfinished transaction has an un-undone update on `page`.
    pub fn has_uncommitted(&self, page: PageId) -> bool {
        let logs: Vec<Arc<PrivateLog>> = self.registry.read().values().cloned().collect();
        logs.iter().any(|log| {
            let inner = log.lock();
            !inner.state.is_finished() && inner.entries.iter().any(|e| e.rec.page_id == page && !e.undone)
        })
    }

    pub fn set_state(&self, log: &PrivateLog, next: LogState) -> Result<()> {
        let mut inner = log.lock();
        if !inner.state.can_become(next) {
            return Err(EngineError::illegal(format!(
                "{}: {:?} -> {:?}",
                log.txn_id, inner.state, next
            )));
        }
        inner.state = next;
        Ok(())
    }

    /// Drops a finished log and returns its extents to the pool. Blocks
    /// while a scanner holds the log latch.
    pub fn release_log(&self, txn_id: TxnId) -> Result<()> {
        let log = self
            .registry
            .read()
            .get(&txn_id)
            .cloned()
            .ok_or_else(|| EngineError::illegal(format!("{txn_id} has no open log")))?;
        let inner = log.lock();
        if !inner.state.is_finished() {
            return Err(EngineError::illegal(format!("release of {:?} log of {txn_id}", inner.state)));
        }
        self.registry.write().remove(&txn_id);
        self.pool.lock().free(inner.extents.iter().map(|e| e.id));
        Ok(())
    }

    pub fn open_logs(&self) -> usize {
        self.registry.read().len()
    }

    /// Sleeps up to `wait` before single-page rollback scans the logs;
    /// returns early once the manager is shut down.
    pub fn configurable_wait(&self, wait: Duration) {
        if wait.is_zero() {
            return;
        }
        let mut down = self.shutdown.lock();
        if !*down {
            self.shutdown_cv.wait_for(&mut down, wait);
        }
    }

    pub fn shutdown(&self) {
        *self.shutdown.lock() = true;
        self.shutdown_cv.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn vlm() -> VolatileLogManager {
        VolatileLogManager::new(DEFAULT_EXTENT_SIZE, 64)
    }

    fn upd(txn: u64, page: u64) -> LogRecord {
        LogRecord::update(TxnId(txn), PageId(page), 24, &[0; 4], &[1; 4])
    }

    #[test]
    fn first_log_starts_at_zero_and_counts_prior_appends() {
        let m = vlm();
        let a = m.open_log(TxnId(1)).unwrap();
        assert_eq!(a.start_vlsn, Vlsn(0));
        for _ in 0..5 {
            m.append(&a, upd(1, 1)).unwrap();
        }
        let b = m.open_log(TxnId(2)).unwrap();
        assert_eq!(b.start_vlsn, Vlsn(5));
    }

    #[test]
    fn duplicate_open_is_refused() {
        let m = vlm();
        m.open_log(TxnId(1)).unwrap();
        assert!(m.open_log(TxnId(1)).is_err());
    }

    #[test]
    fn local_lsns_are_private_offsets() {
        let m = vlm();
        let a = m.open_log(TxnId(1)).unwrap();
        m.append(&a, upd(1, 1)).unwrap();
        m.append(&a, upd(1, 1)).unwrap();
        let inner = a.lock();
        assert_eq!(inner.entries[0].rec.lsn, Lsn(0));
        assert_eq!(inner.entries[1].rec.lsn, Lsn(upd(1, 1).encoded_len() as u64));
    }

    #[test]
    fn append_to_committed_log_fails() {
        let m = vlm();
        let a = m.open_log(TxnId(1)).unwrap();
        m.set_state(&a, LogState::Committing).unwrap();
        m.set_state(&a, LogState::Committed).unwrap();
        assert!(m.append(&a, upd(1, 1)).is_err());
    }

    #[test]
    fn interleaved_writers_collected_newest_first() {
        let m = vlm();
        let t1 = m.open_log(TxnId(1)).unwrap();
        let t2 = m.open_log(TxnId(2)).unwrap();
        m.append(&t1, upd(1, 9)).unwrap(); // 1
        m.append(&t2, upd(2, 9)).unwrap(); // 2
        assert_eq!(m.append(&t1, upd(1, 7)).unwrap(), Vlsn(3));
        m.append(&t2, upd(2, 8)).unwrap(); // 4
        assert_eq!(m.append(&t2, upd(2, 7)).unwrap(), Vlsn(5));

        let got: Vec<_> = m.collect_undo_candidates(PageId(7), Vlsn(6)).iter().map(|c| (c.rec.txn_id, c.vlsn)).collect();
        assert_eq!(got, vec![(TxnId(2), Vlsn(5)), (TxnId(1), Vlsn(3))]);
        let got: Vec<_> = m.collect_undo_candidates(PageId(7), Vlsn(4)).iter().map(|c| (c.rec.txn_id, c.vlsn)).collect();
        assert_eq!(got, vec![(TxnId(1), Vlsn(3))]);
        assert!(m.collect_undo_candidates(PageId(100), Vlsn(6)).is_empty());
    }

    #[test]
    fn state_transition_table() {
        let m = vlm();
        let a = m.open_log(TxnId(1)).unwrap();
        m.set_state(&a, LogState::Committing).unwrap();
        m.set_state(&a, LogState::Committed).unwrap();
        assert!(m.set_state(&a, LogState::Aborting).is_err());
        let b = m.open_log(TxnId(2)).unwrap();
        m.set_state(&b, LogState::Aborting).unwrap();
        m.set_state(&b, LogState::Aborted).unwrap();
    }

    #[test]
    fn release_frees_extents_and_hides_log() {
        let m = VolatileLogManager::new(2 * upd(1, 1).encoded_len(), 4);
        let a = m.open_log(TxnId(1)).unwrap();
        for _ in 0..6 {
            m.append(&a, upd(1, 1)).unwrap();
        }
        assert_eq!(a.lock().extents.len(), 3);
        assert!(m.release_log(TxnId(1)).is_err());
        m.set_state(&a, LogState::Committing).unwrap();
        m.set_state(&a, LogState::Committed).unwrap();
        m.release_log(TxnId(1)).unwrap();
        assert_eq!(m.extents_in_use(), 0);
        assert!(m.collect_undo_candidates(PageId(1), Vlsn(100)).is_empty());
    }

    #[test]
    fn extents_chain_in_allocation_order() {
        let m = VolatileLogManager::new(150, 8);
        let a = m.open_log(TxnId(1)).unwrap();
        for _ in 0..5 {
            m.append(&a, upd(1, 1)).unwrap();
        }
        let inner = a.lock();
        for w in inner.extents.windows(2) {
            assert_eq!(w[0].next, Some(w[1].id));
            assert!(w[0].used <= w[0].capacity);
        }
        assert_eq!(inner.extents.last().unwrap().next, None);
    }

    #[test]
    fn pool_exhaustion_is_a_resource_error() {
        let m = VolatileLogManager::new(DEFAULT_EXTENT_SIZE, 1);
        m.open_log(TxnId(1)).unwrap();
        assert!(matches!(m.open_log(TxnId(2)), Err(EngineError::ResourceExhausted(_))));
    }

    #[test]
    fn release_blocks_while_scanner_holds_log_latch() {
        let m = Arc::new(vlm());
        let a = m.open_log(TxnId(1)).unwrap();
        m.set_state(&a, LogState::Aborting).unwrap();
        m.set_state(&a, LogState::Aborted).unwrap();
        let held = a.lock();
        let m2 = Arc::clone(&m);
        let started = Instant::now();
        let h = std::thread::spawn(move || {
            m2.release_log(TxnId(1)).unwrap();
            Instant::now()
        });
        std::thread::sleep(Duration::from_millis(30));
        assert_eq!(m.open_logs(), 1);
        drop(held);
        let released_at = h.join().unwrap();
        assert!(released_at.duration_since(started) >= Duration::from_millis(30));
        assert_eq!(m.open_logs(), 0);
    }

    #[test]
    fn wait_zero_returns_immediately_and_shutdown_interrupts() {
        let m = Arc::new(vlm());
        let t = Instant::now();
        m.configurable_wait(Duration::ZERO);
        assert!(t.elapsed() < Duration::from_millis(5));
        let m2 = Arc::clone(&m);
        let h = std::thread::spawn(move || {
            let t = Instant::now();
            m2.configurable_wait(Duration::from_secs(10));
            t.elapsed()
        });
        std::thread::sleep(Duration::from_millis(20));
        m.shutdown();
        assert!(h.join().unwrap() < Duration::from_secs(5));
    }

    #[test]
    fn vlsns_unique_across_threads() {
        let m = Arc::new(VolatileLogManager::new(DEFAULT_EXTENT_SIZE, 64));
        let mut handles = Vec::new();
        for t in 0..4u64 {
            let m = Arc::clone(&m);
            handles.push(std::thread::spawn(move || {
                let log = m.open_log(TxnId(t)).unwrap();
                (0..200).map(|_| m.append(&log, upd(t, t)).unwrap().0).collect::<Vec<_>>()
            }));
        }
        let mut all: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(all, (1..=800).collect::<Vec<_>>());
    }

    mod completeness {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Brute-force: record every append, then ask for each (page, bound).
            #[test]
            fn collection_matches_enumeration(
                ops in prop::collection::vec((0u64..3, 0u64..4), 1..40),
                released in prop::collection::vec(any::<bool>(), 3),
            ) {
                let m = vlm();
                let logs: Vec<_> = (0..3).map(|t| m.open_log(TxnId(t)).unwrap()).collect();
                let mut history = Vec::new();
                for (t, p) in ops {
                    let v = m.append(&logs[t as usize], upd(t, p)).unwrap();
                    history.push((t, p, v));
                }
                for (t, &rel) in released.iter().enumerate() {
                    if rel {
                        m.set_state(&logs[t], LogState::Aborting).unwrap();
                        m.set_state(&logs[t], LogState::Aborted).unwrap();
                        m.release_log(TxnId(t as u64)).unwrap();
                    }
                }
                let top = m.current_vlsn().0 + 1;
                for page in 0..4u64 {
                    for bound in 0..=top {
                        let mut want: Vec<_> = history
                            .iter()
                            .filter(|(t, p, v)| *p == page && v.0 <= bound && !released[*t as usize])
                            .map(|(t, _, v)| (TxnId(*t), *v))
                            .collect();
                        want.sort_by_key(|w| std::cmp::Reverse(w.1));
                        let got: Vec<_> = m
                            .collect_undo_candidates(PageId(page), Vlsn(bound))
                            .iter()
                            .map(|c| (c.rec.txn_id, c.vlsn))
                            .collect();
                        prop_assert_eq!(got, want);
                    }
                }
            }
        }
    }
}
