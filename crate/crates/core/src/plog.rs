//! Persistent log: a single append-only byte stream on the virtual disk.
//! Its only write operation is the atomic copy of a committed record group
//! into previously reserved space.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::error::{EngineError, Result};
use crate::log::{decode, Decoded, LogRecord, Lsn};
use crate::sim::disk::VirtualDisk;

struct Positions {
    end: u64,
    durable: u64,
    failed: bool,
}

pub struct PersistentLog {
    disk: VirtualDisk,
    pos: Mutex<Positions>,
    durable_cv: Condvar,
}

impl PersistentLog {
    /// Opens the log with everything in `[0, end)` considered durable.
    pub fn open(disk: VirtualDisk, end: u64) -> Self {
        PersistentLog { disk, pos: Mutex::new(Positions { end, durable: end, failed: false }), durable_cv: Condvar::new() }
    }

    pub fn end_offset(&self) -> Lsn {
        Lsn(self.pos.lock().end)
    }

    pub fn durable_lsn(&self) -> Lsn {
        Lsn(self.pos.lock().durable)
    }

    /// Reserves `s` contiguous bytes and returns their first offset.
    pub fn reserve_space(&self, s: u64) -> Result<Lsn> {
        if s == 0 {
            return Err(EngineError::illegal("zero-byte log reservation"));
        }
        let mut p = self.pos.lock();
        let at = p.end;
        p.end = p.end.checked_add(s).ok_or(EngineError::ResourceExhausted("log device"))?;
        Ok(Lsn(at))
    }

    /// Writes one encoded record group at its reserved offset. Durability
    /// follows with [`PersistentLog::sync`].
    pub fn atomic_copy(&self, base: Lsn, bytes: &[u8]) -> Result<()> {
        self.disk.write_log(base.0, bytes).map_err(|e| self.fail(e.into()))
    }

    /// Syncs and publishes the new durable end.
    pub fn sync(&self) -> Result<Lsn> {
        let upto = self.disk.sync_log().map_err(|e| self.fail(e.into()))?;
        Ok(Lsn(upto))
    }

    /// Advances `durable_lsn` and wakes WAL waiters.
    pub fn publish_durable(&self, upto: Lsn) {
        let mut p = self.pos.lock();
        if upto.0 > p.durable {
            p.durable = upto.0;
        }
        drop(p);
        self.durable_cv.notify_all();
    }

    fn fail(&self, e: EngineError) -> EngineError {
        self.pos.lock().failed = true;
        self.durable_cv.notify_all();
        e
    }

    /// Marks the log dead and wakes all waiters.
    pub fn mark_failed(&self) {
        self.pos.lock().failed = true;
        self.durable_cv.notify_all();
    }

    /// Blocks until every byte up to and including `lsn` is durable.
    pub fn wait_durable_past(&self, lsn: Lsn) -> Result<()> {
        if lsn.is_null() {
            return Ok(());
        }
        let mut p = self.pos.lock();
        loop {
            if p.durable > lsn.0 {
                return Ok(());
            }
            if p.failed {
                return Err(EngineError::Crashed);
            }
            self.durable_cv.wait_for(&mut p, Duration::from_millis(50));
        }
    }

    pub fn read_record(&self, lsn: Lsn) -> Result<LogRecord> {
        if lsn.is_null() || lsn.0 >= self.durable_lsn().0 {
            return Err(EngineError::InvalidLsn(lsn));
        }
        read_record_at(&self.disk, lsn)
    }

    pub fn scan_from(&self, start: Lsn) -> LogScan {
        LogScan::new(self.disk.read_log_tail(start.0), start.0)
    }
}

/// Reads the record whose first byte is at `lsn`, checking it claims that
/// position.
pub fn read_record_at(disk: &VirtualDisk, lsn: Lsn) -> Result<LogRecord> {
    let head = disk.read_log(lsn.0, 4).map_err(|_| EngineError::InvalidLsn(lsn))?;
    let total = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
    let bytes = disk.read_log(lsn.0, total).map_err(|_| EngineError::InvalidLsn(lsn))?;
    match decode(&bytes) {
        Decoded::Record(rec, _) if rec.lsn == lsn => Ok(rec),
        _ => Err(EngineError::InvalidLsn(lsn)),
    }
}

/// Forward iterator over intact records of a byte range; stops at the
/// first torn record.
pub struct LogScan {
    bytes: Vec<u8>,
    base: u64,
    pos: usize,
}

impl LogScan {
    pub fn new(bytes: Vec<u8>, base: u64) -> Self {
        LogScan { bytes, base, pos: 0 }
    }

    /// Offset of the byte after the last record yielded so far.
    pub fn end(&self) -> Lsn {
        Lsn(self.base + self.pos as u64)
    }
}

impl Iterator for LogScan {
    type Item = (Lsn, LogRecord);

    fn next(&mut self) -> Option<Self::Item> {
        match decode(&self.bytes[self.pos..]) {
            Decoded::Record(rec, len) => {
                let at = Lsn(self.base + self.pos as u64);
                self.pos += len;
                Some((at, rec))
            }
            Decoded::TornTail => None,
        }
    }
}

/// Acknowledgment of a durable commit: the group's byte range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct CommitReceipt {
    pub start: Lsn,
    pub end: Lsn,
}

pub type Completion<T> = mpsc::Receiver<Result<T>>;

/// Commit queue drained in batches by the commit daemon.
pub struct GroupCommitQueue<T> {
    inner: Mutex<QueueState<T>>,
    cv: Condvar,
}

struct QueueState<T> {
    items: VecDeque<(T, Instant)>,
    closed: bool,
}

impl<T> Default for GroupCommitQueue<T> {
    fn default() -> Self {
        GroupCommitQueue { inner: Mutex::new(QueueState { items: VecDeque::new(), closed: false }), cv: Condvar::new() }
    }
}

impl<T> GroupCommitQueue<T> {
    pub fn submit(&self, item: T) -> Result<()> {
        let mut q = self.inner.lock();
        if q.closed {
            return Err(EngineError::ShutDown);
        }
        q.items.push_back((item, Instant::now()));
        drop(q);
        self.cv.notify_all();
        Ok(())
    }

    pub fn close(&self) -> Vec<T> {
        let mut q = self.inner.lock();
        q.closed = true;
        let left = q.items.drain(..).map(|(t, _)| t).collect();
        drop(q);
        self.cv.notify_all();
        left
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().closed
    }

    /// Waits for a first member, then keeps the batch open until `window`
    /// has passed since that member arrived or `max` members are queued.
    /// Members for which `alone` is true form a batch by themselves.
    /// Returns `None` once closed.
    pub fn next_batch(&self, window: Duration, max: usize, alone: impl Fn(&T) -> bool) -> Option<Vec<T>> {
        let mut q = self.inner.lock();
        loop {
            if q.closed {
                return None;
            }
            if let Some((first, arrived)) = q.items.front() {
                if alone(first) {
                    return q.items.pop_front().map(|(t, _)| vec![t]);
                }
                let deadline = *arrived + window;
                let now = Instant::now();
                if q.items.len() >= max || now >= deadline {
                    break;
                }
                self.cv.wait_until(&mut q, deadline);
            } else {
                self.cv.wait(&mut q);
            }
        }
        let mut batch = Vec::new();
        while batch.len() < max {
            match q.items.front() {
                Some((t, _)) if !alone(t) => batch.push(q.items.pop_front().unwrap().0),
                _ => break,
            }
        }
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::{PageId, TxnId};
    use std::sync::Arc;

    #[test]
    fn reservations_are_contiguous() {
        let log = PersistentLog::open(VirtualDisk::new(), 0);
        assert_eq!(log.reserve_space(100).unwrap(), Lsn(0));
        assert_eq!(log.reserve_space(50).unwrap(), Lsn(100));
        assert!(log.reserve_space(0).is_err());
    }

    #[test]
    fn concurrent_reservations_are_disjoint() {
        let log = Arc::new(PersistentLog::open(VirtualDisk::new(), 0));
        let mut hs = Vec::new();
        for size in [10u64, 20] {
            let log = Arc::clone(&log);
            hs.push(std::thread::spawn(move || (log.reserve_space(size).unwrap().0, size)));
        }
        let mut got: Vec<_> = hs.into_iter().map(|h| h.join().unwrap()).collect();
        got.sort();
        assert_eq!(got[0].0, 0);
        assert_eq!(got[1].0, got[0].1);
    }

    fn group(txn: u64, base: u64, updates: usize) -> Vec<u8> {
        let mut out = Vec::new();
        let mut at = base;
        for i in 0..updates {
            let mut r = LogRecord::update(TxnId(txn), PageId(1), 24, &[i as u8; 4], &[9; 4]);
            r.lsn = Lsn(at);
            at += r.encoded_len() as u64;
            r.encode_into(&mut out).unwrap();
        }
        let mut c = LogRecord::commit(TxnId(txn), false);
        c.lsn = Lsn(at);
        c.encode_into(&mut out).unwrap();
        out
    }

    #[test]
    fn scan_yields_lsn_equal_offset_and_stops_at_torn_tail() {
        let disk = VirtualDisk::new();
        let log = PersistentLog::open(disk.clone(), 0);
        assert_eq!(log.scan_from(Lsn(0)).count(), 0);
        let g1 = group(1, 0, 3);
        let base = log.reserve_space(g1.len() as u64).unwrap();
        log.atomic_copy(base, &g1).unwrap();
        let g2 = group(2, g1.len() as u64, 1);
        log.atomic_copy(log.reserve_space(g2.len() as u64).unwrap(), &g2[..g2.len() - 3]).unwrap();
        let mut scan = log.scan_from(Lsn(0));
        let recs: Vec<_> = scan.by_ref().collect();
        assert_eq!(recs.len(), 5);
        for (at, r) in &recs {
            assert_eq!(*at, r.lsn);
        }
        assert_eq!(scan.end(), Lsn(g1.len() as u64 + 65));
    }

    #[test]
    fn read_record_checks_bounds_and_boundaries() {
        let disk = VirtualDisk::new();
        let log = PersistentLog::open(disk.clone(), 0);
        let g = group(1, 0, 3);
        log.atomic_copy(log.reserve_space(g.len() as u64).unwrap(), &g).unwrap();
        assert!(log.read_record(Lsn(0)).is_err(), "not durable yet");
        let upto = log.sync().unwrap();
        log.publish_durable(upto);
        let first = log.read_record(Lsn(0)).unwrap();
        assert_eq!(first.txn_id, TxnId(1));
        assert_eq!(first.undo_image().unwrap().bytes, &[0; 4]);
        assert!(log.read_record(Lsn(1)).is_err());
        assert!(log.read_record(Lsn::NULL).is_err());
    }

    #[test]
    fn batch_collects_window_and_respects_max() {
        let q: GroupCommitQueue<u32> = GroupCommitQueue::default();
        for i in 0..5 {
            q.submit(i).unwrap();
        }
        assert_eq!(q.next_batch(Duration::from_millis(1), 3, |_| false), Some(vec![0, 1, 2]));
        assert_eq!(q.next_batch(Duration::from_millis(1), 3, |_| false), Some(vec![3, 4]));
        q.submit(7).unwrap();
        q.submit(8).unwrap();
        assert_eq!(q.next_batch(Duration::ZERO, 64, |&x| x == 7), Some(vec![7]));
        q.close();
        assert!(q.next_batch(Duration::ZERO, 64, |_| false).is_none());
        assert_eq!(q.submit(1), Err(EngineError::ShutDown));
    }
}
