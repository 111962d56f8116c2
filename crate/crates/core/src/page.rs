//! 8 KiB page layout.
//!
//! ```text
//! offset  size  field
//!      0     8  page_lsn (u64::MAX until the first committed update)
//!      8     8  page_id
//!     16     2  slot_count
//!     18     2  free_offset (first byte past the slot area)
//!     20     4  reserved
//!     24     *  slot_count cells of CELL_SIZE bytes
//! ```
//!
//! A cell is `state: u16` (0 free, 1 live, 2 deleted), `len: u16`, then up to
//! [`MAX_PAYLOAD`] payload bytes. Every record mutation touches one
//! contiguous byte range of one cell, so it is logged as a single physical
//! before/after image.

use crate::log::{Lsn, PageId};

pub const PAGE_SIZE: usize = 8192;
pub const PAGE_HEADER_LEN: usize = 24;
pub const MAX_PAYLOAD: usize = 512;
pub const CELL_HEADER_LEN: usize = 4;
pub const CELL_SIZE: usize = CELL_HEADER_LEN + MAX_PAYLOAD;
pub const SLOTS_PER_PAGE: usize = (PAGE_SIZE - PAGE_HEADER_LEN) / CELL_SIZE;

pub type PageBytes = [u8; PAGE_SIZE];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellState {
    Free,
    Live,
    Deleted,
}

impl CellState {
    pub fn tag(self) -> u16 {
        match self {
            CellState::Free => 0,
            CellState::Live => 1,
            CellState::Deleted => 2,
        }
    }

    fn from_tag(tag: u16) -> CellState {
        match tag {
            1 => CellState::Live,
            2 => CellState::Deleted,
            _ => CellState::Free,
        }
    }
}

pub fn page_lsn(page: &PageBytes) -> Lsn {
    Lsn(u64::from_le_bytes(page[0..8].try_into().unwrap()))
}

pub fn set_page_lsn(page: &mut PageBytes, lsn: Lsn) {
    page[0..8].copy_from_slice(&lsn.0.to_le_bytes());
}

pub fn header_page_id(page: &PageBytes) -> PageId {
    PageId(u64::from_le_bytes(page[8..16].try_into().unwrap()))
}

pub fn slot_count(page: &PageBytes) -> u16 {
    u16::from_le_bytes([page[16], page[17]])
}

/// A zeroed page that has never seen a committed update.
pub fn blank_page() -> Box<PageBytes> {
    let mut p = Box::new([0u8; PAGE_SIZE]);
    set_page_lsn(&mut p, Lsn::NULL);
    p
}

/// Offset and after-image of the header fields written when a page is
/// formatted (page_id, slot_count, free_offset).
pub fn format_image(pid: PageId) -> (u16, Vec<u8>) {
    let mut v = Vec::with_capacity(12);
    v.extend_from_slice(&pid.0.to_le_bytes());
    v.extend_from_slice(&(SLOTS_PER_PAGE as u16).to_le_bytes());
    v.extend_from_slice(&((PAGE_HEADER_LEN + SLOTS_PER_PAGE * CELL_SIZE) as u16).to_le_bytes());
    (8, v)
}

pub fn is_formatted(page: &PageBytes) -> bool {
    slot_count(page) as usize == SLOTS_PER_PAGE
}

pub fn cell_offset(slot: u16) -> usize {
    PAGE_HEADER_LEN + slot as usize * CELL_SIZE
}

pub fn cell_state(page: &PageBytes, slot: u16) -> CellState {
    let at = cell_offset(slot);
    CellState::from_tag(u16::from_le_bytes([page[at], page[at + 1]]))
}

pub fn cell_len(page: &PageBytes, slot: u16) -> usize {
    let at = cell_offset(slot);
    u16::from_le_bytes([page[at + 2], page[at + 3]]) as usize
}

pub fn cell_payload(page: &PageBytes, slot: u16) -> Option<&[u8]> {
    if cell_state(page, slot) != CellState::Live {
        return None;
    }
    let at = cell_offset(slot) + CELL_HEADER_LEN;
    Some(&page[at..at + cell_len(page, slot).min(MAX_PAYLOAD)])
}

/// Copies a physical image into the page.
pub fn apply_image(page: &mut PageBytes, offset: u16, bytes: &[u8]) {
    let at = offset as usize;
    page[at..at + bytes.len()].copy_from_slice(bytes);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn page_capacity_arithmetic() {
        // (8192 - 24) / (4 + 512) = 15.8
        assert_eq!(SLOTS_PER_PAGE, 15);
        const { assert!(PAGE_HEADER_LEN + SLOTS_PER_PAGE * CELL_SIZE <= PAGE_SIZE) };
        const { assert!(PAGE_HEADER_LEN + (SLOTS_PER_PAGE + 1) * CELL_SIZE > PAGE_SIZE) };
    }

    #[test]
    fn blank_page_has_null_lsn_and_free_cells() {
        let p = blank_page();
        assert!(page_lsn(&p).is_null());
        assert!(!is_formatted(&p));
        assert_eq!(cell_state(&p, 0), CellState::Free);
    }

    #[test]
    fn format_image_never_covers_page_lsn() {
        let (off, bytes) = format_image(PageId(9));
        assert!(off as usize >= 8);
        let mut p = blank_page();
        apply_image(&mut p, off, &bytes);
        assert!(is_formatted(&p));
        assert_eq!(header_page_id(&p), PageId(9));
        assert!(page_lsn(&p).is_null());
    }
}
