//! Deterministic in-memory disk holding the page store, the log stream and
//! the master record, with crash injection and raw inspection.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DiskError;
use crate::log::{Lsn, PageId};
use crate::page::PAGE_SIZE;

pub type PageImage = Box<[u8; PAGE_SIZE]>;

/// When the disk fails.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    /// Allow this many writes, then fail every later write.
    pub crash_after_writes: Option<u64>,
    /// Seeds how much unsynced log survives a crash.
    pub crash_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WriteEvent {
    Page { page_id: PageId, page_lsn: Lsn },
    Log { offset: u64, len: usize },
    Sync { upto: u64 },
    Truncate { len: u64 },
    Master { lsn: Lsn },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DiskCounters {
    pub writes: u64,
    pub page_writes: u64,
    pub log_writes: u64,
    pub syncs: u64,
    pub log_reads: u64,
    pub page_reads: u64,
}

#[derive(Clone, Default)]
struct DiskState {
    pages: BTreeMap<PageId, PageImage>,
    log: Vec<u8>,
    synced: u64,
    master: Option<Lsn>,
    plan: FaultPlan,
    crashed: bool,
    counters: DiskCounters,
    journal: Vec<WriteEvent>,
}

impl DiskState {
    /// Counts a write against the fault plan.
    fn admit_write(&mut self) -> Result<(), DiskError> {
        if self.crashed {
            return Err(DiskError::Crashed);
        }
        if let Some(limit) = self.plan.crash_after_writes {
            if self.counters.writes >= limit {
                self.crashed = true;
                return Err(DiskError::Crashed);
            }
        }
        self.counters.writes += 1;
        Ok(())
    }
}

/// Read-only copy of everything persistent at one instant.
#[derive(Clone, Debug)]
pub struct RawDiskView {
    pub pages: BTreeMap<PageId, PageImage>,
    /// Every byte written to the log, synced or not.
    pub log: Vec<u8>,
    pub synced: u64,
    pub master: Option<Lsn>,
}

/// Shared handle to a virtual disk. Clones refer to the same device.
#[derive(Clone, Default)]
pub struct VirtualDisk {
    state: Arc<Mutex<DiskState>>,
}

impl VirtualDisk {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_plan(plan: FaultPlan) -> Self {
        let disk = Self::new();
        disk.set_plan(plan);
        disk
    }

    pub fn set_plan(&self, plan: FaultPlan) {
        self.state.lock().plan = plan;
    }

    pub fn is_crashed(&self) -> bool {
        self.state.lock().crashed
    }

    /// Fails every later write, as if power was cut now.
    pub fn crash(&self) {
        self.state.lock().crashed = true;
    }

    pub fn counters(&self) -> DiskCounters {
        self.state.lock().counters
    }

    pub fn journal(&self) -> Vec<WriteEvent> {
        self.state.lock().journal.clone()
    }

    pub fn page_ids(&self) -> Vec<PageId> {
        self.state.lock().pages.keys().copied().collect()
    }

    pub fn has_page(&self, pid: PageId) -> bool {
        self.state.lock().pages.contains_key(&pid)
    }

    pub fn read_page(&self, pid: PageId) -> Result<PageImage, DiskError> {
        let mut st = self.state.lock();
        st.counters.page_reads += 1;
        st.pages.get(&pid).cloned().ok_or(DiskError::NoSuchPage(pid))
    }

    /// Page writes are atomic and durable once they return.
    pub fn write_page(&self, pid: PageId, image: &[u8; PAGE_SIZE]) -> Result<(), DiskError> {
        let mut st = self.state.lock();
        st.admit_write()?;
        st.counters.page_writes += 1;
        let page_lsn = Lsn(u64::from_le_bytes(image[0..8].try_into().unwrap()));
        st.journal.push(WriteEvent::Page { page_id: pid, page_lsn });
        st.pages.insert(pid, Box::new(*image));
        Ok(())
    }

    pub fn log_len(&self) -> u64 {
        self.state.lock().log.len() as u64
    }

    pub fn synced_len(&self) -> u64 {
        self.state.lock().synced
    }

    /// Writes log bytes at `offset`, which must be the current end.
    pub fn write_log(&self, offset: u64, bytes: &[u8]) -> Result<(), DiskError> {
        let mut st = self.state.lock();
        st.admit_write()?;
        let end = st.log.len() as u64;
        if offset < st.synced {
            return Err(DiskError::SyncedOverwrite { offset, synced: st.synced });
        }
        if offset > end {
            return Err(DiskError::LogGap { offset, end });
        }
        st.log.truncate(offset as usize);
        st.log.extend_from_slice(bytes);
        st.counters.log_writes += 1;
        st.journal.push(WriteEvent::Log { offset, len: bytes.len() });
        Ok(())
    }

    /// Makes every written log byte durable.
    pub fn sync_log(&self) -> Result<u64, DiskError> {
        let mut st = self.state.lock();
        if st.crashed {
            return Err(DiskError::Crashed);
        }
        st.synced = st.log.len() as u64;
        st.counters.syncs += 1;
        let upto = st.synced;
        st.journal.push(WriteEvent::Sync { upto });
        Ok(upto)
    }

    /// Cuts the log at `len` (torn-tail removal at restart); durable.
    pub fn truncate_log(&self, len: u64) -> Result<(), DiskError> {
        let mut st = self.state.lock();
        st.admit_write()?;
        st.log.truncate(len as usize);
        st.synced = st.log.len() as u64;
        st.journal.push(WriteEvent::Truncate { len });
        Ok(())
    }

    pub fn read_log(&self, offset: u64, len: usize) -> Result<Vec<u8>, DiskError> {
        let mut st = self.state.lock();
        st.counters.log_reads += 1;
        let start = offset as usize;
        let end = start.checked_add(len).ok_or(DiskError::LogRange { offset, len })?;
        if end > st.log.len() {
            return Err(DiskError::LogRange { offset, len });
        }
        Ok(st.log[start..end].to_vec())
    }

    /// Reads from `offset` to the end of the written log.
    pub fn read_log_tail(&self, offset: u64) -> Vec<u8> {
        let mut st = self.state.lock();
        st.counters.log_reads += 1;
        st.log.get(offset as usize..).map(|s| s.to_vec()).unwrap_or_default()
    }

    pub fn master(&self) -> Option<Lsn> {
        self.state.lock().master
    }

    pub fn write_master(&self, lsn: Lsn) -> Result<(), DiskError> {
        let mut st = self.state.lock();
        st.admit_write()?;
        st.master = Some(lsn);
        st.journal.push(WriteEvent::Master { lsn });
        Ok(())
    }

    /// Atomic snapshot of all persistent bytes.
    pub fn freeze_and_inspect(&self) -> RawDiskView {
        let st = self.state.lock();
        RawDiskView {
            pages: st.pages.clone(),
            log: st.log.clone(),
            synced: st.synced,
            master: st.master,
        }
    }

    /// Crashes the device and returns what survives on a fresh device:
    /// pages, master, synced log bytes, plus a seed-determined prefix of the
    /// unsynced log bytes (which may end inside a record).
    pub fn crash_image(&self) -> VirtualDisk {
        let mut st = self.state.lock();
        st.crashed = true;
        let written = st.log.len() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(st.plan.crash_seed ^ 0x005e_ed0f_d15c);
        let keep = if written > st.synced { rng.gen_range(st.synced..=written) } else { written };
        let image = DiskState {
            pages: st.pages.clone(),
            log: st.log[..keep as usize].to_vec(),
            synced: keep,
            master: st.master,
            ..DiskState::default()
        };
        VirtualDisk { state: Arc::new(Mutex::new(image)) }
    }

    /// Writes the durable state (synced log only) to a host file.
    pub fn save(&self, path: &Path) -> Result<(), DiskError> {
        let st = self.state.lock();
        let mut out = Vec::new();
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&st.master.unwrap_or(Lsn::NULL).0.to_le_bytes());
        out.extend_from_slice(&st.synced.to_le_bytes());
        out.extend_from_slice(&st.log[..st.synced as usize]);
        out.extend_from_slice(&(st.pages.len() as u64).to_le_bytes());
        for (pid, img) in &st.pages {
            out.extend_from_slice(&pid.0.to_le_bytes());
            out.extend_from_slice(&img[..]);
        }
        let mut f = std::fs::File::create(path).map_err(|e| DiskError::Image(e.to_string()))?;
        f.write_all(&out).map_err(|e| DiskError::Image(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<VirtualDisk, DiskError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| DiskError::Image(format!("{}: {e}", path.display())))?;
        let bad = || DiskError::Image(format!("{}: not a disk image", path.display()));
        let mut cur = ImageCursor { buf: &buf, pos: 0 };
        if cur.take(IMAGE_MAGIC.len()).ok_or_else(bad)? != IMAGE_MAGIC {
            return Err(bad());
        }
        let master = Lsn(cur.u64().ok_or_else(bad)?);
        let log_len = cur.u64().ok_or_else(bad)? as usize;
        let log = cur.take(log_len).ok_or_else(bad)?.to_vec();
        let count = cur.u64().ok_or_else(bad)?;
        let mut pages = BTreeMap::new();
        for _ in 0..count {
            let pid = PageId(cur.u64().ok_or_else(bad)?);
            let bytes = cur.take(PAGE_SIZE).ok_or_else(bad)?;
            let mut img = Box::new([0u8; PAGE_SIZE]);
            img.copy_from_slice(bytes);
            pages.insert(pid, img);
        }
        let state = DiskState {
            pages,
            synced: log.len() as u64,
            log,
            master: (!master.is_null()).then_some(master),
            ..DiskState::default()
        };
        Ok(VirtualDisk { state: Arc::new(Mutex::new(state)) })
    }

    /// Independent deep copy (used by tests to fork a disk state).
    pub fn fork(&self) -> VirtualDisk {
        let st = self.state.lock().clone();
        VirtualDisk { state: Arc::new(Mutex::new(st)) }
    }

    /// Installs a page image directly, bypassing the fault plan.
    pub fn install_page(&self, pid: PageId, image: &[u8; PAGE_SIZE]) {
        self.state.lock().pages.insert(pid, Box::new(*image));
    }
}

const IMAGE_MAGIC: &[u8; 8] = b"RDODISK1";

struct ImageCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ImageCursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crash_after_zero_writes_leaves_virgin_disk() {
        let disk = VirtualDisk::with_plan(FaultPlan { crash_after_writes: Some(0), crash_seed: 1 });
        assert_eq!(disk.write_log(0, b"hello"), Err(DiskError::Crashed));
        let img = disk.crash_image();
        assert_eq!(img.log_len(), 0);
        assert!(img.page_ids().is_empty());
        assert!(img.master().is_none());
    }

    #[test]
    fn synced_bytes_survive_every_crash_seed() {
        for seed in 0..32 {
            let disk = VirtualDisk::with_plan(FaultPlan { crash_after_writes: None, crash_seed: seed });
            disk.write_log(0, &[1; 100]).unwrap();
            disk.sync_log().unwrap();
            disk.write_log(100, &[2; 50]).unwrap();
            let img = disk.crash_image();
            let log = img.read_log_tail(0);
            assert!(log.len() >= 100 && log.len() <= 150);
            assert_eq!(&log[..100], &[1; 100][..]);
            assert!(log[100..].iter().all(|&b| b == 2));
        }
    }

    #[test]
    fn crash_image_is_deterministic_per_seed() {
        let run = |seed| {
            let disk = VirtualDisk::with_plan(FaultPlan { crash_after_writes: None, crash_seed: seed });
            disk.write_log(0, &[7; 300]).unwrap();
            disk.crash_image().log_len()
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn writes_below_synced_watermark_are_refused() {
        let disk = VirtualDisk::new();
        disk.write_log(0, &[1; 10]).unwrap();
        disk.sync_log().unwrap();
        assert!(matches!(disk.write_log(5, &[0]), Err(DiskError::SyncedOverwrite { .. })));
        assert!(matches!(disk.write_log(11, &[0]), Err(DiskError::LogGap { .. })));
    }

    #[test]
    fn save_and_load_round_trip() {
        let disk = VirtualDisk::new();
        disk.write_log(0, &[9; 40]).unwrap();
        disk.sync_log().unwrap();
        disk.write_log(40, &[8; 10]).unwrap();
        let mut img = [0u8; PAGE_SIZE];
        img[100] = 42;
        disk.write_page(PageId(3), &img).unwrap();
        disk.write_master(Lsn(0)).unwrap();
        let dir = std::env::temp_dir().join(format!("redo-disk-{}", std::process::id()));
        disk.save(&dir).unwrap();
        let back = VirtualDisk::load(&dir).unwrap();
        std::fs::remove_file(&dir).ok();
        assert_eq!(back.read_log_tail(0), vec![9; 40]);
        assert_eq!(back.read_page(PageId(3)).unwrap()[100], 42);
        assert_eq!(back.master(), Some(Lsn(0)));
    }
}
