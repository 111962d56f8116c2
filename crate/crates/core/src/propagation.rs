//! Page propagation: Alg. 2 flushing with single-page rollback, the
//! cleaner pass, and the committed-copy procedure shared with snapshots.

use std::sync::atomic::Ordering;

use crate::buffer::Frame;
use crate::engine::Shared;
use crate::error::{EngineError, Result};
use crate::log::{Lsn, PageId};
use crate::page::{self, PageBytes};
use crate::vlm::{LogState, UndoCandidate};

/// The SPR skip rule: true when a candidate's effect is absent from a copy
/// or belongs to the committed state the copy's PageLSN names.
pub fn spr_skips(c: &UndoCandidate, copy_lsn: Lsn) -> bool {
    c.state == LogState::Aborted || c.undone || (c.lsn_final && !copy_lsn.is_null() && c.rec.lsn <= copy_lsn)
}

impl Shared {
    /// Copies a frame and rolls the copy back to its latest committed state.
    /// Returns the page id, the copy and its PageLSN.
    fn spr_copy(&self, frame: &Frame) -> Result<(PageId, Box<PageBytes>, Lsn)> {
        let _gate = self.coord.read();
        let (pid, mut copy, copy_lsn, copy_vlsn) = {
            let d = frame.write();
            (d.page_id, d.page.clone(), d.page_lsn(), d.page_vlsn)
        };
        self.vlm.configurable_wait(self.config.spr_wait);
        for c in self.vlm.collect_undo_candidates(pid, copy_vlsn) {
            if spr_skips(&c, copy_lsn) {
                continue;
            }
            let img = c
                .rec
                .undo_image()
                .ok_or_else(|| EngineError::Integrity(format!("update on {pid} without undo image")))?;
            page::apply_image(&mut copy, img.offset, img.bytes);
            self.stats.spr_undos.fetch_add(1, Ordering::Relaxed);
            if self.is_recovering() {
                self.stats.undo_ops_during_recovery.fetch_add(1, Ordering::Relaxed);
            }
        }
        Ok((pid, copy, copy_lsn))
    }

    /// Alg. 2. Returns whether a page image was written.
    pub(crate) fn flush_frame(&self, frame: &Frame) -> Result<bool> {
        let _serial = frame.flush_lock.lock();
        let (pid, copy, copy_lsn) = self.spr_copy(frame)?;
        if copy_lsn.is_null() || frame.read().propagated_lsn == Some(copy_lsn) {
            return Ok(false);
        }
        self.plog.wait_durable_past(copy_lsn)?;
        let written = self.disk.write_page(pid, &copy);
        self.io(written)?;
        let mut d = frame.write();
        if d.page_id == pid && d.page_lsn() == copy_lsn {
            d.propagated_lsn = Some(copy_lsn);
            d.rec_lsn = Lsn::NULL;
        } else if d.page_id == pid {
            d.propagated_lsn = Some(copy_lsn);
        }
        self.stats.flushes.fetch_add(1, Ordering::Relaxed);
        Ok(true)
    }

    pub(crate) fn flush_page(&self, pid: PageId) -> Result<bool> {
        let r = self.pool.lookup(pid).ok_or(EngineError::PageNotFound(pid))?;
        self.flush_frame(r.frame())
    }

    /// Flushes up to `budget` unpropagated frames, lowest redo-from LSN
    /// first. Returns the number of images written.
    pub(crate) fn clean_pass(&self, budget: usize) -> Result<usize> {
        let mut dirty: Vec<_> = self
            .pool
            .resident()
            .into_iter()
            .filter_map(|r| {
                let d = r.read();
                let key = d.redo_from();
                let dirty = !d.is_propagated();
                drop(d);
                dirty.then_some((key, r))
            })
            .collect();
        dirty.sort_by_key(|(k, r)| (*k, r.page_id()));
        let mut n = 0;
        for (_, r) in dirty.into_iter().take(budget) {
            if self.flush_frame(r.frame())? {
                n += 1;
            }
        }
        Ok(n)
    }

    /// The latest committed state of `pid`, waiting until it is durable.
    pub(crate) fn committed_copy(&self, pid: PageId) -> Result<(Box<PageBytes>, Lsn)> {
        let r = self.fetch(pid, false)?;
        let (_, copy, lsn) = self.spr_copy(r.frame())?;
        drop(r);
        self.plog.wait_durable_past(lsn)?;
        Ok((copy, lsn))
    }
}
