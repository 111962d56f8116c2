//! Transactions: update logging into the private log, record locks,
//! savepoints, abort by backward private-log scan, and commit.

use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::buffer::{FrameData, PageRef};
use crate::engine::{CommitWork, Shared};
use crate::error::{EngineError, Result};
use crate::locks::LockMode;
use crate::log::{LogRecord, PageId, TxnId};
use crate::page;
use crate::plog::CommitReceipt;
use crate::store::RecordId;
use crate::vlm::{LogState, PrivateLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxnKind {
    User,
    System,
}

pub struct Transaction {
    pub(crate) shared: Arc<Shared>,
    id: TxnId,
    kind: TxnKind,
    log: Arc<PrivateLog>,
    held: HashMap<RecordId, LockMode>,
    savepoints: Vec<(String, usize)>,
    finished: bool,
}

impl std::fmt::Debug for Transaction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transaction").field("id", &self.id).field("kind", &self.kind).finish()
    }
}

impl Transaction {
    pub(crate) fn begin_kind(shared: Arc<Shared>, kind: TxnKind) -> Result<Transaction> {
        if kind == TxnKind::User || !shared.is_recovering() {
            shared.check_open()?;
        }
        let id = TxnId(shared.next_txn.fetch_add(1, Ordering::SeqCst));
        let log = shared.vlm.open_log(id)?;
        Ok(Transaction { shared, id, kind, log, held: HashMap::new(), savepoints: Vec::new(), finished: false })
    }

    pub fn id(&self) -> TxnId {
        self.id
    }

    pub fn kind(&self) -> TxnKind {
        self.kind
    }

    pub fn start_vlsn(&self) -> crate::log::Vlsn {
        self.log.start_vlsn
    }

    pub fn state(&self) -> LogState {
        self.log.state()
    }

    /// Number of live (not undone) records in the private log.
    pub fn live_records(&self) -> usize {
        self.log.lock().live_entries().count()
    }

    fn ensure_active(&self) -> Result<()> {
        if self.finished || self.log.state() != LogState::Active {
            return Err(EngineError::illegal(format!("{} is not active", self.id)));
        }
        Ok(())
    }

    /// Acquires a record lock, honouring the configured wait timeout.
    pub fn lock(&mut self, rid: RecordId, mode: LockMode) -> Result<()> {
        self.ensure_active()?;
        if self.kind == TxnKind::System {
            return Err(EngineError::illegal("system transactions take no record locks"));
        }
        if self.held.get(&rid).is_some_and(|m| m.covers(mode)) {
            return Ok(());
        }
        self.shared
            .locks
            .lock(self.id, rid, mode, self.shared.config.lock_timeout)
            .map_err(|_| EngineError::LockTimeout { txn: self.id, rid })?;
        let e = self.held.entry(rid).or_insert(mode);
        *e = (*e).max(mode);
        Ok(())
    }

    pub(crate) fn try_lock(&mut self, rid: RecordId, mode: LockMode) -> bool {
        if self.held.get(&rid).is_some_and(|m| m.covers(mode)) {
            return true;
        }
        if self.shared.locks.try_lock(self.id, rid, mode) {
            let e = self.held.entry(rid).or_insert(mode);
            *e = (*e).max(mode);
            true
        } else {
            false
        }
    }

    pub fn holds(&self, rid: RecordId, mode: LockMode) -> bool {
        self.held.get(&rid).is_some_and(|m| m.covers(mode))
    }

    /// Logs and applies one physical update to a page this caller holds
    /// exclusively latched. The PageLSN is left alone.
    pub fn log_update(&mut self, page: &PageRef, frame: &mut FrameData, offset: u16, after: &[u8]) -> Result<()> {
        self.ensure_active()?;
        if frame.page_id != page.page_id() {
            return Err(EngineError::illegal("latched frame does not hold the named page"));
        }
        if after.is_empty() {
            return Ok(());
        }
        let at = offset as usize;
        if at < 8 || at + after.len() > page::PAGE_SIZE {
            return Err(EngineError::illegal(format!("update range {at}+{} outside the page body", after.len())));
        }
        let before = frame.page[at..at + after.len()].to_vec();
        let rec = LogRecord::update(self.id, page.page_id(), offset, &before, after);
        let vlsn = self.shared.vlm.append(&self.log, rec)?;
        page::apply_image(&mut frame.page, offset, after);
        frame.page_vlsn = vlsn;
        if let Some(o) = &self.shared.observer {
            o.on_update(self.id, page.page_id(), offset, &before, after);
        }
        Ok(())
    }

    /// Fetches `pid`, latches it exclusively and logs one update.
    pub fn update_page(&mut self, pid: PageId, offset: u16, after: &[u8]) -> Result<()> {
        let page = self.shared.fetch(pid, self.kind == TxnKind::System)?;
        let mut f = page.write();
        self.log_update(&page, &mut f, offset, after)
    }

    pub fn savepoint(&mut self, name: &str) -> Result<()> {
        self.ensure_active()?;
        let mark = self.log.lock().entries.len();
        self.savepoints.push((name.to_string(), mark));
        Ok(())
    }

    /// Undoes every update made after the named savepoint. The savepoint
    /// itself stays on the stack.
    pub fn rollback_to(&mut self, name: &str) -> Result<()> {
        self.ensure_active()?;
        let pos = self
            .savepoints
            .iter()
            .rposition(|(n, _)| n == name)
            .ok_or_else(|| EngineError::UnknownSavepoint(name.to_string()))?;
        let mark = self.savepoints[pos].1;
        self.savepoints.truncate(pos + 1);
        let _gate = self.shared.coord.write();
        self.undo_from(mark)
    }

    /// Backward scan over private-log entries `from..`, undoing each one
    /// in place. Never reads the persistent log.
    fn undo_from(&self, from: usize) -> Result<()> {
        let todo: Vec<(usize, PageId, u16, Vec<u8>)> = {
            let inner = self.log.lock();
            inner
                .entries
                .iter()
                .enumerate()
                .skip(from)
                .filter(|(_, e)| !e.undone && !e.rec.page_id.is_null())
                .filter_map(|(i, e)| e.rec.undo_image().map(|img| (i, e.rec.page_id, img.offset, img.bytes.to_vec())))
                .collect()
        };
        for (i, pid, offset, before) in todo.into_iter().rev() {
            let page = self
                .shared
                .pool
                .lookup(pid)
                .ok_or_else(|| EngineError::Integrity(format!("uncommitted page {pid} is not resident")))?;
            let mut f = page.write();
            page::apply_image(&mut f.page, offset, &before);
            self.log.lock().entries[i].undone = true;
            drop(f);
            self.shared.stats.abort_undos.fetch_add(1, Ordering::Relaxed);
            if self.shared.is_recovering() {
                self.shared.stats.undo_ops_during_recovery.fetch_add(1, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    /// Rolls the transaction back and releases its locks and private log.
    pub fn abort(mut self) -> Result<()> {
        self.abort_in_place()
    }

    fn abort_in_place(&mut self) -> Result<()> {
        self.ensure_active()?;
        let gate = self.shared.coord.write();
        self.shared.vlm.set_state(&self.log, LogState::Aborting)?;
        let undone = self.undo_from(0);
        self.shared.vlm.set_state(&self.log, LogState::Aborted)?;
        drop(gate);
        self.shared.stats.aborts.fetch_add(1, Ordering::Relaxed);
        self.finish()?;
        undone
    }

    /// Commits and waits for durability. Returns the group's byte range, or
    /// `None` for a transaction that logged nothing.
    pub fn commit(mut self) -> Result<Option<CommitReceipt>> {
        self.ensure_active()?;
        let vlm = &self.shared.vlm;
        if self.log.lock().live_entries().next().is_none() {
            vlm.set_state(&self.log, LogState::Committing)?;
            vlm.set_state(&self.log, LogState::Committed)?;
            self.finish()?;
            return Ok(None);
        }
        vlm.append(&self.log, LogRecord::commit(self.id, self.kind == TxnKind::System))?;
        vlm.set_state(&self.log, LogState::Committing)?;
        let work = CommitWork::Txn { log: Arc::clone(&self.log) };
        match self.shared.submit(work) {
            Ok(receipt) => {
                self.finish()?;
                if self.kind == TxnKind::User {
                    self.shared.note_commit();
                }
                Ok(Some(receipt))
            }
            Err(e) => {
                self.finished = true;
                Err(e)
            }
        }
    }

    fn finish(&mut self) -> Result<()> {
        self.finished = true;
        self.shared.locks.release_all(self.id, self.held.drain().map(|(rid, _)| rid));
        let _gate = self.shared.coord.write();
        self.shared.vlm.release_log(self.id)
    }
}

impl Drop for Transaction {
    fn drop(&mut self) {
        if !self.finished && self.log.state() == LogState::Active {
            let _ = self.abort_in_place();
        }
    }
}
