//! Engine handle, configuration, shared state, the commit pipeline and the
//! buffer-pool miss path.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock};
use serde::Serialize;

use crate::buffer::{BufferPool, PageRef};
use crate::error::{DiskError, EngineError, Result};
use crate::locks::LockTable;
use crate::log::{LogRecord, Lsn, PageId, TxnId};
use crate::page::{self, PageBytes};
use crate::plog::{CommitReceipt, GroupCommitQueue, PersistentLog};
use crate::recovery::{self, RecoveryReport};
use crate::sim::disk::VirtualDisk;
use crate::snapshot::Snapshot;
use crate::store::Catalog;
use crate::txn::{Transaction, TxnKind};
use crate::vlm::{LogState, PrivateLog, VolatileLogManager, DEFAULT_EXTENT_SIZE, DEFAULT_MAX_EXTENTS};

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub pool_frames: usize,
    pub extent_size: usize,
    pub max_extents: usize,
    /// Run a commit daemon that batches commits. When false, each commit
    /// is processed on the committing thread.
    pub commit_daemon: bool,
    pub group_commit_window: Duration,
    pub max_batch: usize,
    pub lock_timeout: Duration,
    pub spr_wait: Duration,
    /// Committed transactions between automatic checkpoints; 0 disables.
    pub checkpoint_interval: u64,
    /// Period of the background cleaner; `None` disables it.
    pub cleaner_interval: Option<Duration>,
    pub cleaner_budget: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            pool_frames: 1024,
            extent_size: DEFAULT_EXTENT_SIZE,
            max_extents: DEFAULT_MAX_EXTENTS,
            commit_daemon: true,
            group_commit_window: Duration::from_millis(1),
            max_batch: 64,
            lock_timeout: Duration::from_millis(500),
            spr_wait: Duration::ZERO,
            checkpoint_interval: 256,
            cleaner_interval: Some(Duration::from_millis(5)),
            cleaner_budget: 16,
        }
    }
}

impl EngineConfig {
    /// Single-threaded configuration: no daemons, inline commits and
    /// no-wait locking.
    pub fn deterministic() -> Self {
        EngineConfig {
            commit_daemon: false,
            lock_timeout: Duration::ZERO,
            cleaner_interval: None,
            ..EngineConfig::default()
        }
    }
}

/// Hooks called by the engine at points the test oracle needs to observe.
pub trait EngineObserver: Send + Sync {
    /// A page byte range changed from `before` to `after` in `txn`.
    fn on_update(&self, _txn: TxnId, _page: PageId, _offset: u16, _before: &[u8], _after: &[u8]) {}
    /// `txn`'s record group is durable. Called before the engine publishes
    /// the new durable LSN.
    fn on_durable(&self, _txn: TxnId, _receipt: CommitReceipt) {}
}

#[derive(Default)]
pub(crate) struct Stats {
    pub spr_undos: AtomicU64,
    pub abort_undos: AtomicU64,
    pub undo_ops_during_recovery: AtomicU64,
    pub flushes: AtomicU64,
    pub checkpoints: AtomicU64,
    pub commits: AtomicU64,
    pub batches: AtomicU64,
    pub aborts: AtomicU64,
    pub redo_applied: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub spr_undos: u64,
    pub abort_undos: u64,
    pub undo_ops_during_recovery: u64,
    pub flushes: u64,
    pub checkpoints: u64,
    pub commits: u64,
    pub batches: u64,
    pub aborts: u64,
    pub redo_applied: u64,
    pub lock_requests: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Phase {
    Recovering,
    Open,
    Crashed,
    ShutDown,
}

impl Phase {
    fn from_u8(v: u8) -> Phase {
        match v {
            0 => Phase::Recovering,
            1 => Phase::Open,
            2 => Phase::Crashed,
            _ => Phase::ShutDown,
        }
    }

    fn as_u8(self) -> u8 {
        match self {
            Phase::Recovering => 0,
            Phase::Open => 1,
            Phase::Crashed => 2,
            Phase::ShutDown => 3,
        }
    }
}

/// Buffer-frame view used by tests and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FrameState {
    pub page_lsn: Lsn,
    pub propagated_lsn: Option<Lsn>,
    pub committed: bool,
    pub propagated: bool,
}

pub(crate) enum CommitWork {
    Txn { log: Arc<PrivateLog> },
    Checkpoint,
}

pub(crate) struct CommitRequest {
    work: CommitWork,
    reply: mpsc::SyncSender<Result<CommitReceipt>>,
}

pub(crate) struct Shared {
    pub config: EngineConfig,
    pub disk: VirtualDisk,
    pub plog: PersistentLog,
    pub vlm: VolatileLogManager,
    pub pool: BufferPool,
    pub locks: LockTable,
    /// Abort/flush coordination privilege.
    pub coord: RwLock<()>,
    pub commit_serial: Mutex<()>,
    pub queue: GroupCommitQueue<CommitRequest>,
    pub catalog: Mutex<Catalog>,
    pub next_txn: AtomicU64,
    phase: AtomicU8,
    daemon_running: AtomicBool,
    pub stats: Stats,
    pub observer: Option<Arc<dyn EngineObserver>>,
    commits_since_checkpoint: AtomicU64,
    stop: Mutex<bool>,
    stop_cv: Condvar,
}

impl Shared {
    pub fn phase(&self) -> Phase {
        Phase::from_u8(self.phase.load(Ordering::SeqCst))
    }

    fn set_phase(&self, p: Phase) {
        self.phase.store(p.as_u8(), Ordering::SeqCst);
    }

    pub fn is_recovering(&self) -> bool {
        self.phase() == Phase::Recovering
    }

    pub fn check_open(&self) -> Result<()> {
        match self.phase() {
            Phase::Open => Ok(()),
            Phase::Recovering => Err(EngineError::Recovering),
            Phase::Crashed => Err(EngineError::Crashed),
            Phase::ShutDown => Err(EngineError::ShutDown),
        }
    }

    /// Stops the engine after a failed write or an integrity failure.
    pub fn crash(&self) {
        self.set_phase(Phase::Crashed);
        self.plog.mark_failed();
        self.vlm.shutdown();
        for req in self.queue.close() {
            let _ = req.reply.send(Err(EngineError::Crashed));
        }
        self.signal_stop();
    }

    fn signal_stop(&self) {
        *self.stop.lock() = true;
        self.stop_cv.notify_all();
    }

    /// Maps a disk failure to engine crash semantics.
    pub fn io<T>(&self, r: Result<T, DiskError>) -> Result<T> {
        r.map_err(|e| {
            self.crash();
            match e {
                DiskError::Crashed => EngineError::Crashed,
                other => other.into(),
            }
        })
    }

    /// Returns the resident frame for `pid`, loading it on a miss. With
    /// `create`, a page absent from disk is materialized blank.
    pub fn fetch(&self, pid: PageId, create: bool) -> Result<PageRef> {
        if let Some(r) = self.pool.lookup(pid) {
            return Ok(r);
        }
        let _miss = self.pool.miss_guard();
        if let Some(r) = self.pool.lookup(pid) {
            return Ok(r);
        }
        let (image, on_disk) = match self.disk.read_page(pid) {
            Ok(img) => (img, true),
            Err(DiskError::NoSuchPage(_)) if create => (page::blank_page(), false),
            Err(DiskError::NoSuchPage(_)) => return Err(EngineError::PageNotFound(pid)),
            Err(e) => return self.io(Err(e)),
        };
        let idx = match self.pool.take_free() {
            Some(i) => i,
            None => self.evict_one()?,
        };
        Ok(self.pool.install(idx, pid, image, on_disk))
    }

    fn evict_one(&self) -> Result<usize> {
        for _ in 0..200 {
            let Some(victim) = self.pool.choose_victim(|pid| self.vlm.has_uncommitted(pid)) else {
                std::thread::sleep(Duration::from_millis(1));
                continue;
            };
            if !victim.frame.read().is_propagated() {
                if let Err(e) = self.flush_frame(&victim.frame) {
                    self.pool.restore(victim);
                    return Err(e);
                }
            }
            return Ok(victim.index);
        }
        Err(EngineError::ResourceExhausted("buffer pool: every frame pinned or uncommitted"))
    }

    /// Submits commit work and waits for its durable acknowledgment.
    pub(crate) fn submit(&self, work: CommitWork) -> Result<CommitReceipt> {
        let (tx, rx) = mpsc::sync_channel(1);
        let req = CommitRequest { work, reply: tx };
        if self.daemon_running.load(Ordering::SeqCst) {
            self.queue.submit(req)?;
        } else {
            self.process_batch(vec![req]);
        }
        rx.recv().unwrap_or(Err(EngineError::ShutDown))
    }

    pub(crate) fn process_batch(&self, batch: Vec<CommitRequest>) {
        if batch.is_empty() {
            return;
        }
        let serial = self.commit_serial.lock();
        if matches!(self.phase(), Phase::Crashed) {
            drop(serial);
            for req in batch {
                let _ = req.reply.send(Err(EngineError::Crashed));
            }
            return;
        }
        let outcome = if matches!(batch[0].work, CommitWork::Checkpoint) {
            self.write_checkpoint().map(|r| vec![r])
        } else {
            self.commit_group(&batch)
        };
        drop(serial);
        match outcome {
            Ok(receipts) => {
                for (req, r) in batch.into_iter().zip(receipts) {
                    let _ = req.reply.send(Ok(r));
                }
            }
            Err(e) => {
                self.crash();
                let e = if matches!(e, EngineError::Disk(DiskError::Crashed)) { EngineError::Crashed } else { e };
                for req in batch {
                    let _ = req.reply.send(Err(e.clone()));
                }
            }
        }
    }

    /// One reservation, one atomic copy per member, one sync.
    fn commit_group(&self, batch: &[CommitRequest]) -> Result<Vec<CommitReceipt>> {
        let logs: Vec<&Arc<PrivateLog>> = batch
            .iter()
            .map(|r| match &r.work {
                CommitWork::Txn { log, .. } => log,
                CommitWork::Checkpoint => unreachable!("checkpoints are batched alone"),
            })
            .collect();
        let sizes: Vec<u64> = logs
            .iter()
            .map(|l| l.lock().live_entries().map(|e| e.rec.encoded_len() as u64).sum())
            .collect();
        let base = self.plog.reserve_space(sizes.iter().sum())?;
        let mut at = base.0;
        let mut receipts = Vec::with_capacity(logs.len());
        for (log, &size) in logs.iter().zip(&sizes) {
            let bytes = self.assign_lsns_at(log, Lsn(at))?;
            debug_assert_eq!(bytes.len() as u64, size);
            self.plog.atomic_copy(Lsn(at), &bytes)?;
            receipts.push(CommitReceipt { start: Lsn(at), end: Lsn(at + size) });
            at += size;
        }
        let upto = self.plog.sync()?;
        if let Some(o) = &self.observer {
            for (log, r) in logs.iter().zip(&receipts) {
                o.on_durable(log.txn_id, *r);
            }
        }
        self.plog.publish_durable(upto);
        for log in &logs {
            self.vlm.set_state(log, LogState::Committed)?;
        }
        self.stats.commits.fetch_add(logs.len() as u64, Ordering::Relaxed);
        self.stats.batches.fetch_add(1, Ordering::Relaxed);
        Ok(receipts)
    }

    /// Alg. 1 for a log whose space starts at `base`: final LSNs, then the
    /// per-page PageLSN and chain updates, then the encoded group.
    pub(crate) fn assign_lsns_at(&self, log: &PrivateLog, base: Lsn) -> Result<Vec<u8>> {
        let mut pages = Vec::new();
        {
            let mut inner = log.lock();
            if inner.state != LogState::Committing {
                return Err(EngineError::illegal(format!("assign_lsns on {:?} log", inner.state)));
            }
            let mut off = base.0;
            for (i, e) in inner.entries.iter_mut().enumerate() {
                if e.undone {
                    continue;
                }
                e.rec.lsn = Lsn(off);
                e.lsn_final = true;
                off += e.rec.encoded_len() as u64;
                if !e.rec.page_id.is_null() {
                    pages.push((i, e.rec.page_id, e.rec.lsn));
                }
            }
        }
        for (i, pid, lsn) in pages {
            let page = self
                .pool
                .lookup(pid)
                .ok_or_else(|| EngineError::Integrity(format!("page {pid} of a committing txn is not resident")))?;
            let mut f = page.write();
            let prev = f.page_lsn();
            page::set_page_lsn(&mut f.page, lsn);
            if f.rec_lsn.is_null() {
                f.rec_lsn = lsn;
            }
            log.lock().entries[i].rec.prev_page_lsn = prev;
        }
        let inner = log.lock();
        let mut out = Vec::new();
        for e in inner.live_entries() {
            e.rec.encode_into(&mut out)?;
        }
        Ok(out)
    }

    fn write_checkpoint(&self) -> Result<CommitReceipt> {
        let mut pages: Vec<(PageId, Lsn)> = self
            .pool
            .resident()
            .iter()
            .filter_map(|r| {
                let d = r.read();
                (!d.is_propagated()).then(|| (d.page_id, d.redo_from()))
            })
            .collect();
        pages.sort();
        let mut rec = LogRecord::checkpoint(&pages);
        rec.txn_id = TxnId(self.next_txn.load(Ordering::SeqCst));
        let len = rec.encoded_len() as u64;
        let base = self.plog.reserve_space(len)?;
        rec.lsn = base;
        let bytes = rec.encode()?;
        self.plog.atomic_copy(base, &bytes)?;
        let upto = self.plog.sync()?;
        self.plog.publish_durable(upto);
        self.disk.write_master(base)?;
        self.stats.checkpoints.fetch_add(1, Ordering::Relaxed);
        Ok(CommitReceipt { start: base, end: Lsn(base.0 + len) })
    }

    pub fn take_checkpoint(&self) -> Result<Lsn> {
        Ok(self.submit(CommitWork::Checkpoint)?.start)
    }

    pub(crate) fn note_commit(&self) {
        let every = self.config.checkpoint_interval;
        if every == 0 {
            return;
        }
        if self.commits_since_checkpoint.fetch_add(1, Ordering::SeqCst) + 1 >= every {
            self.commits_since_checkpoint.store(0, Ordering::SeqCst);
            let _ = self.take_checkpoint();
        }
    }

    pub fn stats(&self) -> StatsSnapshot {
        let s = &self.stats;
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StatsSnapshot {
            spr_undos: g(&s.spr_undos),
            abort_undos: g(&s.abort_undos),
            undo_ops_during_recovery: g(&s.undo_ops_during_recovery),
            flushes: g(&s.flushes),
            checkpoints: g(&s.checkpoints),
            commits: g(&s.commits),
            batches: g(&s.batches),
            aborts: g(&s.aborts),
            redo_applied: g(&s.redo_applied),
            lock_requests: self.locks.requests(),
        }
    }

    /// Runs `body` in a system transaction and commits it.
    pub(crate) fn run_system_txn<R>(
        self: &Arc<Self>,
        body: impl FnOnce(&mut Transaction) -> Result<R>,
    ) -> Result<(R, Option<CommitReceipt>)> {
        let mut tx = Transaction::begin_kind(Arc::clone(self), TxnKind::System)?;
        match body(&mut tx) {
            Ok(r) => Ok((r, tx.commit()?)),
            Err(e) => {
                tx.abort()?;
                Err(e)
            }
        }
    }
}

/// An open storage engine.
pub struct Engine {
    shared: Arc<Shared>,
    daemons: Mutex<Vec<JoinHandle<()>>>,
    recovery: RecoveryReport,
}

impl Engine {
    /// Opens the engine on `disk`, running crash recovery first.
    pub fn open(disk: VirtualDisk, config: EngineConfig) -> Result<Engine> {
        Self::open_with_observer(disk, config, None)
    }

    pub fn open_with_observer(
        disk: VirtualDisk,
        config: EngineConfig,
        observer: Option<Arc<dyn EngineObserver>>,
    ) -> Result<Engine> {
        let analysis = recovery::analyze(&disk)?;
        let valid_end = analysis.valid_end.0;
        let truncated = disk.log_len().saturating_sub(valid_end);
        if disk.log_len() != valid_end || disk.synced_len() != valid_end {
            disk.truncate_log(valid_end).map_err(|e| match e {
                DiskError::Crashed => EngineError::Crashed,
                e => e.into(),
            })?;
        }
        let shared = Arc::new(Shared {
            plog: PersistentLog::open(disk.clone(), valid_end),
            vlm: VolatileLogManager::new(config.extent_size, config.max_extents),
            pool: BufferPool::new(config.pool_frames),
            locks: LockTable::new(),
            coord: RwLock::new(()),
            commit_serial: Mutex::new(()),
            queue: GroupCommitQueue::default(),
            catalog: Mutex::new(Catalog::default()),
            next_txn: AtomicU64::new(analysis.max_txn + 1),
            phase: AtomicU8::new(Phase::Recovering.as_u8()),
            daemon_running: AtomicBool::new(false),
            stats: Stats::default(),
            observer,
            commits_since_checkpoint: AtomicU64::new(0),
            stop: Mutex::new(false),
            stop_cv: Condvar::new(),
            disk,
            config,
        });
        let mut report = recovery::restart(&shared, &analysis)?;
        report.truncated_bytes = truncated;
        *shared.catalog.lock() = Catalog::rebuild(&shared.disk);
        shared.set_phase(Phase::Open);
        let engine = Engine { shared, daemons: Mutex::new(Vec::new()), recovery: report };
        engine.start_daemons();
        Ok(engine)
    }

    fn start_daemons(&self) {
        let mut ds = self.daemons.lock();
        let cfg = &self.shared.config;
        if cfg.commit_daemon {
            self.shared.daemon_running.store(true, Ordering::SeqCst);
            let sh = Arc::clone(&self.shared);
            ds.push(std::thread::spawn(move || {
                let (window, max) = (sh.config.group_commit_window, sh.config.max_batch.max(1));
                while let Some(batch) = sh.queue.next_batch(window, max, |r| matches!(r.work, CommitWork::Checkpoint)) {
                    sh.process_batch(batch);
                }
            }));
        }
        if let Some(every) = cfg.cleaner_interval {
            let sh = Arc::clone(&self.shared);
            ds.push(std::thread::spawn(move || loop {
                {
                    let mut stop = sh.stop.lock();
                    if !*stop {
                        sh.stop_cv.wait_for(&mut stop, every);
                    }
                    if *stop {
                        return;
                    }
                }
                if sh.clean_pass(sh.config.cleaner_budget).is_err() {
                    return;
                }
            }));
        }
    }

    fn stop_daemons(&self) {
        self.shared.daemon_running.store(false, Ordering::SeqCst);
        for req in self.shared.queue.close() {
            let _ = req.reply.send(Err(EngineError::ShutDown));
        }
        self.shared.signal_stop();
        self.shared.vlm.shutdown();
        for h in self.daemons.lock().drain(..) {
            let _ = h.join();
        }
    }

    pub(crate) fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    pub fn begin(&self) -> Result<Transaction> {
        Transaction::begin_kind(Arc::clone(&self.shared), TxnKind::User)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.shared.config
    }

    pub fn disk(&self) -> &VirtualDisk {
        &self.shared.disk
    }

    pub fn phase(&self) -> Phase {
        self.shared.phase()
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.shared.stats()
    }

    pub fn durable_lsn(&self) -> Lsn {
        self.shared.plog.durable_lsn()
    }

    pub fn end_lsn(&self) -> Lsn {
        self.shared.plog.end_offset()
    }

    pub fn current_vlsn(&self) -> crate::log::Vlsn {
        self.shared.vlm.current_vlsn()
    }

    pub fn open_private_logs(&self) -> usize {
        self.shared.vlm.open_logs()
    }

    pub fn extents_in_use(&self) -> usize {
        self.shared.vlm.extents_in_use()
    }

    /// Pins a page, loading it from disk on a miss.
    pub fn fetch_page(&self, pid: PageId) -> Result<PageRef> {
        self.shared.fetch(pid, false)
    }

    pub fn is_resident(&self, pid: PageId) -> bool {
        self.shared.pool.is_resident(pid)
    }

    pub fn resident_pages(&self) -> Vec<PageId> {
        self.shared.pool.resident_ids()
    }

    pub fn frame_state(&self, pid: PageId) -> Option<FrameState> {
        let r = self.shared.pool.lookup(pid)?;
        let d = r.read();
        Some(FrameState {
            page_lsn: d.page_lsn(),
            propagated_lsn: d.propagated_lsn,
            committed: !self.shared.vlm.has_uncommitted(pid),
            propagated: d.is_propagated(),
        })
    }

    /// Copy of the current in-buffer bytes of a page, uncommitted updates
    /// included.
    pub fn buffer_image(&self, pid: PageId) -> Option<Box<PageBytes>> {
        let r = self.shared.pool.lookup(pid)?;
        let d = r.read();
        Some(d.page.clone())
    }

    pub fn flush_page(&self, pid: PageId) -> Result<bool> {
        self.shared.flush_page(pid)
    }

    pub fn clean_pass(&self, budget: usize) -> Result<usize> {
        self.shared.clean_pass(budget)
    }

    pub fn take_checkpoint(&self) -> Result<Lsn> {
        self.shared.take_checkpoint()
    }

    /// The latest committed state of a page, with uncommitted updates rolled
    /// back. Takes no record locks.
    pub fn committed_copy(&self, pid: PageId) -> Result<Box<PageBytes>> {
        Ok(self.shared.committed_copy(pid)?.0)
    }

    /// The committed state of `pid` as of `lsn`.
    pub fn fix_at(&self, pid: PageId, lsn: Lsn) -> Result<Box<PageBytes>> {
        crate::snapshot::fix_at(&self.shared, pid, lsn)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot::new(Arc::clone(&self.shared))
    }

    pub fn snapshot_at(&self, as_of: Lsn) -> Result<Snapshot> {
        Snapshot::at(Arc::clone(&self.shared), as_of)
    }

    /// Runs `body` as a system transaction; returns its result and receipt.
    pub fn run_system_txn<R>(
        &self,
        body: impl FnOnce(&mut Transaction) -> Result<R>,
    ) -> Result<(R, Option<CommitReceipt>)> {
        self.shared.check_open()?;
        self.shared.run_system_txn(body)
    }

    /// Flushes every page, writes a final checkpoint and stops the daemons.
    pub fn shutdown(self) -> Result<()> {
        self.shared.check_open()?;
        self.shared.clean_pass(usize::MAX)?;
        self.shared.take_checkpoint()?;
        self.stop_daemons();
        self.shared.set_phase(Phase::ShutDown);
        Ok(())
    }

    /// Stops all engine threads without flushing anything, as if power had
    /// been cut. The disk keeps whatever it holds.
    pub fn halt(self) {
        self.shared.crash();
        self.stop_daemons();
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if matches!(self.shared.phase(), Phase::Open) {
            self.shared.set_phase(Phase::ShutDown);
        }
        self.stop_daemons();
    }
}
