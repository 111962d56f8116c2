//! Record-granularity S/X lock table with FIFO waiting and a wait timeout.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::log::TxnId;
use crate::store::RecordId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LockMode {
    Shared,
    Exclusive,
}

impl LockMode {
    fn compatible(self, other: LockMode) -> bool {
        self == LockMode::Shared && other == LockMode::Shared
    }

    pub fn covers(self, wanted: LockMode) -> bool {
        self == LockMode::Exclusive || wanted == LockMode::Shared
    }
}

#[derive(Default)]
struct LockEntry {
    holders: Vec<(TxnId, LockMode)>,
    waiters: VecDeque<TxnId>,
}

impl LockEntry {
    fn grantable(&self, txn: TxnId, mode: LockMode) -> bool {
        self.holders.iter().all(|&(h, m)| h == txn || m.compatible(mode))
    }

    fn grant(&mut self, txn: TxnId, mode: LockMode) {
        match self.holders.iter_mut().find(|(h, _)| *h == txn) {
            Some((_, m)) => *m = (*m).max(mode),
            None => self.holders.push((txn, mode)),
        }
    }
}

#[derive(Default)]
pub struct LockTable {
    table: Mutex<HashMap<RecordId, LockEntry>>,
    cv: Condvar,
    requests: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockTimeout;

impl LockTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of lock requests ever made.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn holders(&self, rid: RecordId) -> Vec<(TxnId, LockMode)> {
        self.table.lock().get(&rid).map(|e| e.holders.clone()).unwrap_or_default()
    }

    /// Acquires or upgrades a lock, waiting up to `timeout`. Waiters are
    /// served in arrival order; an upgrade by a current holder jumps ahead.
    pub fn lock(&self, txn: TxnId, rid: RecordId, mode: LockMode, timeout: Duration) -> Result<(), LockTimeout> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let deadline = Instant::now() + timeout;
        let mut t = self.table.lock();
        let mut queued = false;
        loop {
            let e = t.entry(rid).or_default();
            let holding = e.holders.iter().any(|(h, _)| *h == txn);
            let first = e.waiters.front().is_none_or(|&w| w == txn);
            if e.grantable(txn, mode) && (holding || first) {
                if queued {
                    e.waiters.retain(|&w| w != txn);
                }
                e.grant(txn, mode);
                drop(t);
                self.cv.notify_all();
                return Ok(());
            }
            if !queued {
                e.waiters.push_back(txn);
                queued = true;
            }
            if self.cv.wait_until(&mut t, deadline).timed_out() {
                if let Some(e) = t.get_mut(&rid) {
                    e.waiters.retain(|&w| w != txn);
                    if e.holders.is_empty() && e.waiters.is_empty() {
                        t.remove(&rid);
                    }
                }
                drop(t);
                self.cv.notify_all();
                return Err(LockTimeout);
            }
        }
    }

    /// Grants the lock only if that needs no waiting.
    pub fn try_lock(&self, txn: TxnId, rid: RecordId, mode: LockMode) -> bool {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut t = self.table.lock();
        let e = t.entry(rid).or_default();
        let holding = e.holders.iter().any(|(h, _)| *h == txn);
        if e.grantable(txn, mode) && (holding || e.waiters.is_empty()) {
            e.grant(txn, mode);
            true
        } else {
            if e.holders.is_empty() && e.waiters.is_empty() {
                t.remove(&rid);
            }
            false
        }
    }

    pub fn release_all(&self, txn: TxnId, rids: impl IntoIterator<Item = RecordId>) {
        let mut t = self.table.lock();
        for rid in rids {
            if let Some(e) = t.get_mut(&rid) {
                e.holders.retain(|(h, _)| *h != txn);
                if e.holders.is_empty() && e.waiters.is_empty() {
                    t.remove(&rid);
                }
            }
        }
        drop(t);
        self.cv.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::PageId;
    use std::sync::Arc;

    const R: RecordId = RecordId { page: PageId(1), slot: 0 };
    const MS: Duration = Duration::from_millis(1);

    #[test]
    fn shared_locks_coexist_exclusive_conflicts() {
        let lt = LockTable::new();
        lt.lock(TxnId(1), R, LockMode::Shared, MS).unwrap();
        lt.lock(TxnId(2), R, LockMode::Shared, MS).unwrap();
        assert_eq!(lt.lock(TxnId(3), R, LockMode::Exclusive, MS * 5), Err(LockTimeout));
        lt.release_all(TxnId(1), [R]);
        lt.release_all(TxnId(2), [R]);
        lt.lock(TxnId(3), R, LockMode::Exclusive, MS).unwrap();
        assert!(!lt.try_lock(TxnId(1), R, LockMode::Shared));
    }

    #[test]
    fn sole_holder_upgrades() {
        let lt = LockTable::new();
        lt.lock(TxnId(1), R, LockMode::Shared, MS).unwrap();
        lt.lock(TxnId(1), R, LockMode::Exclusive, MS).unwrap();
        assert_eq!(lt.holders(R), vec![(TxnId(1), LockMode::Exclusive)]);
        lt.lock(TxnId(1), R, LockMode::Shared, MS).unwrap();
        assert_eq!(lt.holders(R), vec![(TxnId(1), LockMode::Exclusive)]);
    }

    #[test]
    fn waiter_is_granted_after_release() {
        let lt = Arc::new(LockTable::new());
        lt.lock(TxnId(1), R, LockMode::Exclusive, MS).unwrap();
        let lt2 = Arc::clone(&lt);
        let h = std::thread::spawn(move || lt2.lock(TxnId(2), R, LockMode::Exclusive, Duration::from_secs(5)));
        std::thread::sleep(Duration::from_millis(20));
        lt.release_all(TxnId(1), [R]);
        assert_eq!(h.join().unwrap(), Ok(()));
        assert_eq!(lt.holders(R), vec![(TxnId(2), LockMode::Exclusive)]);
    }

    #[test]
    fn never_two_exclusive_holders() {
        let lt = Arc::new(LockTable::new());
        let inside = Arc::new(std::sync::atomic::AtomicU32::new(0));
        let mut hs = Vec::new();
        for t in 0..8u64 {
            let lt = Arc::clone(&lt);
            let inside = Arc::clone(&inside);
            hs.push(std::thread::spawn(move || {
                for _ in 0..50 {
                    lt.lock(TxnId(t), R, LockMode::Exclusive, Duration::from_secs(5)).unwrap();
                    assert_eq!(inside.fetch_add(1, Ordering::SeqCst), 0);
                    inside.fetch_sub(1, Ordering::SeqCst);
                    lt.release_all(TxnId(t), [R]);
                }
            }));
        }
        for h in hs {
            h.join().unwrap();
        }
    }
}
