//! Flat record store over slotted pages.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::engine::Engine;
use crate::error::{EngineError, Result};
use crate::locks::LockMode;
use crate::log::PageId;
use crate::page::{self, CellState, PageBytes, CELL_HEADER_LEN, MAX_PAYLOAD, SLOTS_PER_PAGE};
use crate::sim::disk::VirtualDisk;
use crate::txn::Transaction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct RecordId {
    pub page: PageId,
    pub slot: u16,
}

impl RecordId {
    pub const fn new(page: PageId, slot: u16) -> Self {
        RecordId { page, slot }
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.page.0, self.slot)
    }
}

impl FromStr for RecordId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (p, s) = s.split_once(':').ok_or_else(|| format!("record id {s:?} is not PAGE:SLOT"))?;
        let page = p.parse::<u64>().map_err(|e| format!("page {p:?}: {e}"))?;
        let slot = s.parse::<u16>().map_err(|e| format!("slot {s:?}: {e}"))?;
        Ok(RecordId { page: PageId(page), slot })
    }
}

/// Allocated pages and free-space hints.
#[derive(Clone, Debug)]
pub struct Catalog {
    pub pages: Vec<PageId>,
    hints: Vec<PageId>,
    next_page: u64,
}

impl Default for Catalog {
    fn default() -> Self {
        Catalog { pages: Vec::new(), hints: Vec::new(), next_page: 1 }
    }
}

impl Catalog {
    /// Rebuilds the catalog from the formatted pages on disk.
    pub fn rebuild(disk: &VirtualDisk) -> Catalog {
        let mut c = Catalog::default();
        for pid in disk.page_ids() {
            c.next_page = c.next_page.max(pid.0 + 1);
            if disk.read_page(pid).map(|p| page::is_formatted(&p)).unwrap_or(false) {
                c.pages.push(pid);
                c.hints.push(pid);
            }
        }
        c
    }
}

fn cell_bytes(state: CellState, payload: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(CELL_HEADER_LEN + payload.len());
    v.extend_from_slice(&state.tag().to_le_bytes());
    v.extend_from_slice(&(payload.len() as u16).to_le_bytes());
    v.extend_from_slice(payload);
    v
}

fn check_slot(p: &PageBytes, rid: RecordId) -> Result<()> {
    if rid.slot as usize >= SLOTS_PER_PAGE || !page::is_formatted(p) || page::cell_state(p, rid.slot) != CellState::Live {
        return Err(EngineError::NotFound(rid));
    }
    Ok(())
}

impl Transaction {
    fn fetch_record_page(&self, rid: RecordId) -> Result<crate::buffer::PageRef> {
        self.shared.fetch(rid.page, false).map_err(|e| match e {
            EngineError::PageNotFound(_) => EngineError::NotFound(rid),
            e => e,
        })
    }

    /// Inserts a record into the first page with a free, unlocked cell,
    /// allocating a page through a system transaction when none has one.
    pub fn insert(&mut self, payload: &[u8]) -> Result<RecordId> {
        if payload.len() > MAX_PAYLOAD {
            return Err(EngineError::PayloadTooLarge(payload.len()));
        }
        loop {
            let hints = self.shared.catalog.lock().hints.clone();
            for pid in hints {
                let page = self.shared.fetch(pid, false)?;
                let mut f = page.write();
                let free = (0..SLOTS_PER_PAGE as u16).find(|&s| {
                    page::cell_state(&f.page, s) == CellState::Free && self.try_lock(RecordId::new(pid, s), LockMode::Exclusive)
                });
                match free {
                    Some(slot) => {
                        let rid = RecordId::new(pid, slot);
                        self.log_update(&page, &mut f, page::cell_offset(slot) as u16, &cell_bytes(CellState::Live, payload))?;
                        return Ok(rid);
                    }
                    None => {
                        drop(f);
                        self.shared.catalog.lock().hints.retain(|&p| p != pid);
                    }
                }
            }
            allocate_page(&self.shared)?;
        }
    }

    pub fn update(&mut self, rid: RecordId, payload: &[u8]) -> Result<()> {
        if payload.len() > MAX_PAYLOAD {
            return Err(EngineError::PayloadTooLarge(payload.len()));
        }
        self.lock(rid, LockMode::Exclusive)?;
        let page = self.fetch_record_page(rid)?;
        let mut f = page.write();
        check_slot(&f.page, rid)?;
        let at = page::cell_offset(rid.slot);
        let span = CELL_HEADER_LEN + page::cell_len(&f.page, rid.slot).max(payload.len());
        let mut after = f.page[at..at + span].to_vec();
        after[2..4].copy_from_slice(&(payload.len() as u16).to_le_bytes());
        after[4..4 + payload.len()].copy_from_slice(payload);
        self.log_update(&page, &mut f, at as u16, &after)
    }

    pub fn delete(&mut self, rid: RecordId) -> Result<()> {
        self.lock(rid, LockMode::Exclusive)?;
        let page = self.fetch_record_page(rid)?;
        let mut f = page.write();
        check_slot(&f.page, rid)?;
        let at = page::cell_offset(rid.slot);
        self.log_update(&page, &mut f, at as u16, &CellState::Deleted.tag().to_le_bytes())
    }

    /// Reads a record under a shared lock; own uncommitted writes are
    /// visible.
    pub fn read(&mut self, rid: RecordId) -> Result<Vec<u8>> {
        self.lock(rid, LockMode::Shared)?;
        let page = self.fetch_record_page(rid)?;
        let f = page.read();
        check_slot(&f.page, rid)?;
        Ok(page::cell_payload(&f.page, rid.slot).unwrap_or_default().to_vec())
    }
}

/// Formats a fresh page in a system transaction and publishes it in the
/// catalog once durable.
pub(crate) fn allocate_page(shared: &std::sync::Arc<crate::engine::Shared>) -> Result<PageId> {
    let pid = {
        let mut c = shared.catalog.lock();
        while shared.disk.has_page(PageId(c.next_page)) || shared.pool.is_resident(PageId(c.next_page)) {
            c.next_page += 1;
        }
        c.next_page += 1;
        PageId(c.next_page - 1)
    };
    shared.run_system_txn(|tx| {
        let page = shared.fetch(pid, true)?;
        let mut f = page.write();
        let (off, img) = page::format_image(pid);
        tx.log_update(&page, &mut f, off, &img)
    })?;
    let mut c = shared.catalog.lock();
    c.pages.push(pid);
    c.hints.push(pid);
    Ok(pid)
}

/// All live records of `p`.
pub fn live_records(pid: PageId, p: &PageBytes) -> Vec<(RecordId, Vec<u8>)> {
    if !page::is_formatted(p) {
        return Vec::new();
    }
    (0..SLOTS_PER_PAGE as u16)
        .filter_map(|s| page::cell_payload(p, s).map(|b| (RecordId::new(pid, s), b.to_vec())))
        .collect()
}

impl Engine {
    pub fn catalog_pages(&self) -> Vec<PageId> {
        self.shared().catalog.lock().pages.clone()
    }

    pub fn allocate_page(&self) -> Result<PageId> {
        self.shared().check_open()?;
        allocate_page(self.shared())
    }

    /// Frees tombstoned cells of `pid` whose record lock is not held, in a
    /// system transaction. Returns the number of cells freed.
    pub fn compact(&self, pid: PageId) -> Result<usize> {
        let sh = self.shared();
        sh.check_open()?;
        let (freed, _) = sh.run_system_txn(|tx| {
            let page = sh.fetch(pid, false)?;
            let mut f = page.write();
            let mut freed = 0;
            for s in 0..SLOTS_PER_PAGE as u16 {
                if page::cell_state(&f.page, s) == CellState::Deleted && sh.locks.holders(RecordId::new(pid, s)).is_empty() {
                    tx.log_update(&page, &mut f, page::cell_offset(s) as u16, &CellState::Free.tag().to_le_bytes())?;
                    freed += 1;
                }
            }
            Ok(freed)
        })?;
        if freed > 0 {
            let mut c = sh.catalog.lock();
            if !c.hints.contains(&pid) {
                c.hints.push(pid);
            }
        }
        Ok(freed)
    }

    /// Every record visible in the buffer pool or on disk. Meant for a
    /// quiescent engine; uncommitted updates of running transactions would
    /// be included.
    pub fn dump_records(&self) -> Result<BTreeMap<RecordId, Vec<u8>>> {
        let mut out = BTreeMap::new();
        for pid in self.catalog_pages() {
            let page = self.shared().fetch(pid, false)?;
            let f = page.read();
            out.extend(live_records(pid, &f.page));
        }
        Ok(out)
    }
}
