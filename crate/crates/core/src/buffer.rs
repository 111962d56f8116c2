//! Buffer pool: fixed set of frames, a page table, clock replacement.
//!
//! A frame is *propagated* when the disk holds an image with the frame's
//! current PageLSN, and *committed* when no unfinished transaction has an
//! un-undone update on it. The pool only knows the first property; the
//! second is answered by the volatile log manager, which the caller passes
//! in as a predicate when choosing a victim.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::log::{Lsn, PageId, Vlsn};
use crate::page::{self, PageBytes};

pub struct FrameData {
    pub page_id: PageId,
    pub page: Box<PageBytes>,
    /// VLSN of the last in-buffer update.
    pub page_vlsn: Vlsn,
    /// PageLSN of the image on disk; `None` when the page is not on disk.
    pub propagated_lsn: Option<Lsn>,
    /// Lowest LSN committed to this frame since it was last propagated.
    pub rec_lsn: Lsn,
}

impl FrameData {
    pub fn page_lsn(&self) -> Lsn {
        page::page_lsn(&self.page)
    }

    pub fn is_propagated(&self) -> bool {
        match self.propagated_lsn {
            Some(l) => l == self.page_lsn(),
            // Never on disk and never committed to: nothing to write.
            None => self.page_lsn().is_null(),
        }
    }

    /// Redo lower bound recorded in checkpoints.
    pub fn redo_from(&self) -> Lsn {
        match self.propagated_lsn {
            Some(l) if !l.is_null() => l,
            _ => self.rec_lsn,
        }
    }
}

pub struct Frame {
    latch: RwLock<FrameData>,
    pins: AtomicU32,
    referenced: AtomicBool,
    /// Serializes flushes of this frame.
    pub(crate) flush_lock: Mutex<()>,
}

impl Frame {
    fn empty() -> Self {
        Frame {
            latch: RwLock::new(FrameData {
                page_id: PageId::NULL,
                page: page::blank_page(),
                page_vlsn: Vlsn::NONE,
                propagated_lsn: None,
                rec_lsn: Lsn::NULL,
            }),
            pins: AtomicU32::new(0),
            referenced: AtomicBool::new(false),
            flush_lock: Mutex::new(()),
        }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, FrameData> {
        self.latch.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, FrameData> {
        self.latch.write()
    }

    pub fn pin_count(&self) -> u32 {
        self.pins.load(Ordering::Acquire)
    }
}

/// A pinned frame. The frame cannot be evicted while any handle exists.
pub struct PageRef {
    frame: Arc<Frame>,
    page_id: PageId,
}

impl PageRef {
    pub fn page_id(&self) -> PageId {
        self.page_id
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn read(&self) -> RwLockReadGuard<'_, FrameData> {
        self.frame.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, FrameData> {
        self.frame.write()
    }
}

impl Drop for PageRef {
    fn drop(&mut self) {
        self.frame.pins.fetch_sub(1, Ordering::AcqRel);
    }
}

struct Table {
    map: HashMap<PageId, usize>,
    /// Page currently published from each frame.
    owner: Vec<PageId>,
    free: Vec<usize>,
    hand: usize,
}

pub struct BufferPool {
    frames: Vec<Arc<Frame>>,
    table: Mutex<Table>,
    /// Serializes the miss path so a page is loaded at most once.
    miss: Mutex<()>,
}

/// A frame removed from the page table, ready to be reused.
pub struct Victim {
    pub index: usize,
    pub frame: Arc<Frame>,
}

impl BufferPool {
    pub fn new(frames: usize) -> Self {
        let frames: Vec<_> = (0..frames.max(1)).map(|_| Arc::new(Frame::empty())).collect();
        let free = (0..frames.len()).rev().collect();
        let owner = vec![PageId::NULL; frames.len()];
        BufferPool { table: Mutex::new(Table { map: HashMap::new(), owner, free, hand: 0 }), frames, miss: Mutex::new(()) }
    }

    pub fn capacity(&self) -> usize {
        self.frames.len()
    }

    pub fn lookup(&self, pid: PageId) -> Option<PageRef> {
        let t = self.table.lock();
        let &idx = t.map.get(&pid)?;
        Some(self.pin(idx, pid))
    }

    fn pin(&self, idx: usize, pid: PageId) -> PageRef {
        let frame = &self.frames[idx];
        frame.pins.fetch_add(1, Ordering::AcqRel);
        frame.referenced.store(true, Ordering::Relaxed);
        PageRef { frame: Arc::clone(frame), page_id: pid }
    }

    pub fn is_resident(&self, pid: PageId) -> bool {
        self.table.lock().map.contains_key(&pid)
    }

    pub(crate) fn miss_guard(&self) -> MutexGuard<'_, ()> {
        self.miss.lock()
    }

    pub(crate) fn take_free(&self) -> Option<usize> {
        self.table.lock().free.pop()
    }

    /// Clock sweep. Skips pinned frames and frames for which `uncommitted`
    /// returns true; the chosen frame leaves the page table atomically with
    /// the check, so no new pin can reach it.
    pub(crate) fn choose_victim(&self, uncommitted: impl Fn(PageId) -> bool) -> Option<Victim> {
        let mut t = self.table.lock();
        let n = self.frames.len();
        for _ in 0..2 * n {
            let idx = t.hand;
            t.hand = (t.hand + 1) % n;
            let frame = &self.frames[idx];
            let pid = t.owner[idx];
            if pid.is_null() || frame.pin_count() > 0 {
                continue;
            }
            if frame.referenced.swap(false, Ordering::Relaxed) {
                continue;
            }
            if uncommitted(pid) {
                continue;
            }
            t.map.remove(&pid);
            t.owner[idx] = PageId::NULL;
            return Some(Victim { index: idx, frame: Arc::clone(frame) });
        }
        None
    }

    /// Puts a victim back after a failed eviction.
    pub(crate) fn restore(&self, victim: Victim) {
        let pid = victim.frame.read().page_id;
        let mut t = self.table.lock();
        t.map.insert(pid, victim.index);
        t.owner[victim.index] = pid;
    }

    /// Loads `image` into frame `idx` and publishes it under `pid`.
    pub(crate) fn install(&self, idx: usize, pid: PageId, image: Box<PageBytes>, on_disk: bool) -> PageRef {
        let frame = &self.frames[idx];
        {
            let mut d = frame.write();
            let lsn = page::page_lsn(&image);
            d.page_id = pid;
            d.page = image;
            d.page_vlsn = Vlsn::NONE;
            d.propagated_lsn = on_disk.then_some(lsn);
            d.rec_lsn = Lsn::NULL;
        }
        let mut t = self.table.lock();
        t.map.insert(pid, idx);
        t.owner[idx] = pid;
        self.pin(idx, pid)
    }

    /// Pins every resident frame. Used by the cleaner and checkpoints.
    pub fn resident(&self) -> Vec<PageRef> {
        let t = self.table.lock();
        t.map.iter().map(|(&pid, &idx)| self.pin(idx, pid)).collect()
    }

    pub fn resident_ids(&self) -> Vec<PageId> {
        let mut v: Vec<_> = self.table.lock().map.keys().copied().collect();
        v.sort();
        v
    }
}
