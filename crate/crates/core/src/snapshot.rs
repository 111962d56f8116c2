//! Page reconstruction as of an LSN and snapshot readers built on it.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::engine::Shared;
use crate::error::{EngineError, Result};
use crate::log::{Lsn, PageId, TxnId};
use crate::page::{self, PageBytes};
use crate::store::{live_records, RecordId};

/// Committed state of `pid` considering exactly the record groups whose
/// records on this page all have an LSN at or below `l`.
pub(crate) fn fix_at(shared: &Shared, pid: PageId, l: Lsn) -> Result<Box<PageBytes>> {
    let durable = shared.plog.durable_lsn();
    if l.is_null() || l > durable {
        return Err(EngineError::illegal(format!("fix_at({pid}, {l}) beyond durable lsn {durable}")));
    }
    reconstruct_below(shared, pid, l.0 + 1)
}

/// Like [`fix_at`], keeping only records with LSN strictly below `bound`.
fn reconstruct_below(shared: &Shared, pid: PageId, bound: u64) -> Result<Box<PageBytes>> {
    let (mut copy, c) = shared.committed_copy(pid)?;
    if c.is_null() || c.0 < bound {
        return Ok(copy);
    }
    let mut cur = c;
    let mut last_txn: Option<TxnId> = None;
    while !cur.is_null() && cur.0 >= bound {
        cur = undo_one(shared, pid, &mut copy, cur, &mut last_txn)?;
    }
    if let Some(t) = last_txn {
        while !cur.is_null() {
            let rec = shared.plog.read_record(cur)?;
            if rec.txn_id != t {
                break;
            }
            cur = undo_one(shared, pid, &mut copy, cur, &mut last_txn)?;
        }
    }
    Ok(copy)
}

fn undo_one(shared: &Shared, pid: PageId, copy: &mut PageBytes, at: Lsn, last: &mut Option<TxnId>) -> Result<Lsn> {
    let rec = shared.plog.read_record(at)?;
    if rec.page_id != pid {
        return Err(EngineError::Integrity(format!("chain of {pid} reaches a record of page {} at {at}", rec.page_id)));
    }
    let img = rec.undo_image().ok_or_else(|| EngineError::Integrity(format!("record at {at} has no undo image")))?;
    page::apply_image(copy, img.offset, img.bytes);
    page::set_page_lsn(copy, rec.prev_page_lsn);
    *last = Some(rec.txn_id);
    Ok(rec.prev_page_lsn)
}

/// A reader's consistent view of every group that ended at or before
/// `as_of`. Takes no record locks.
pub struct Snapshot {
    shared: Arc<Shared>,
    as_of: Lsn,
    cache: Mutex<HashMap<PageId, Arc<PageBytes>>>,
}

impl Snapshot {
    pub(crate) fn new(shared: Arc<Shared>) -> Snapshot {
        let as_of = shared.plog.durable_lsn();
        Snapshot { shared, as_of, cache: Mutex::new(HashMap::new()) }
    }

    pub(crate) fn at(shared: Arc<Shared>, as_of: Lsn) -> Result<Snapshot> {
        if as_of > shared.plog.durable_lsn() {
            return Err(EngineError::InvalidLsn(as_of));
        }
        Ok(Snapshot { shared, as_of, cache: Mutex::new(HashMap::new()) })
    }

    pub fn as_of(&self) -> Lsn {
        self.as_of
    }

    pub fn page(&self, pid: PageId) -> Result<Arc<PageBytes>> {
        if let Some(p) = self.cache.lock().get(&pid) {
            return Ok(Arc::clone(p));
        }
        let img: Arc<PageBytes> = Arc::from(reconstruct_below(&self.shared, pid, self.as_of.0)?);
        Ok(Arc::clone(self.cache.lock().entry(pid).or_insert(img)))
    }

    pub fn read(&self, rid: RecordId) -> Result<Vec<u8>> {
        let p = self.page(rid.page).map_err(|e| match e {
            EngineError::PageNotFound(_) => EngineError::NotFound(rid),
            e => e,
        })?;
        if rid.slot as usize >= page::SLOTS_PER_PAGE {
            return Err(EngineError::NotFound(rid));
        }
        page::cell_payload(&p, rid.slot).map(<[u8]>::to_vec).ok_or(EngineError::NotFound(rid))
    }

    pub fn records(&self, pid: PageId) -> Result<Vec<(RecordId, Vec<u8>)>> {
        Ok(live_records(pid, &*self.page(pid)?))
    }
}
