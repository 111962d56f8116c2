//! Log record model and its on-disk encoding.
//!
//! Every record is encoded little-endian with a fixed 49-byte header, the
//! UNDO and REDO payloads, and a trailing CRC-32 over everything before it:
//!
//! ```text
//! offset  size  field
//!      0     4  total_len
//!      4     1  type (1 Update, 2 Commit, 3 SystemCommit, 4 Checkpoint)
//!      5     8  txn_id
//!     13     8  page_id (u64::MAX when no page is affected)
//!     21     8  lsn
//!     29     8  prev_page_lsn (u64::MAX when there is no predecessor)
//!     37     8  vlsn (always zero on disk)
//!     45     2  undo_len
//!     47     2  redo_len
//!     49     *  undo payload, then redo payload
//!    end-4   4  crc32
//! ```
//!
//! Update payloads are physical images: a 16-bit in-page offset followed by
//! the bytes of that page region before (UNDO) or after (REDO) the change.

use std::fmt;

use serde::Serialize;

use crate::error::{EngineError, Result};

/// Byte offset into the persistent log.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Lsn(pub u64);

impl Lsn {
    /// "No link" sentinel.
    pub const NULL: Lsn = Lsn(u64::MAX);

    pub fn is_null(self) -> bool {
        self == Lsn::NULL
    }

    pub fn offset(self, by: u64) -> Lsn {
        Lsn(self.0 + by)
    }
}

impl fmt::Debug for Lsn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            f.write_str("Lsn(NULL)")
        } else {
            write!(f, "Lsn({})", self.0)
        }
    }
}

impl fmt::Display for Lsn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            f.write_str("NULL")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Volatile log sequence number: a global ticket ordering in-memory updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Vlsn(pub u64);

impl Vlsn {
    /// Carried by records that do not touch a page.
    pub const NONE: Vlsn = Vlsn(0);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct TxnId(pub u64);

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct PageId(pub u64);

impl PageId {
    pub const NULL: PageId = PageId(u64::MAX);

    pub fn is_null(self) -> bool {
        self == PageId::NULL
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            f.write_str("-")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum LogRecordType {
    Update,
    Commit,
    SystemCommit,
    Checkpoint,
}

impl LogRecordType {
    pub fn tag(self) -> u8 {
        match self {
            LogRecordType::Update => 1,
            LogRecordType::Commit => 2,
            LogRecordType::SystemCommit => 3,
            LogRecordType::Checkpoint => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(LogRecordType::Update),
            2 => Some(LogRecordType::Commit),
            3 => Some(LogRecordType::SystemCommit),
            4 => Some(LogRecordType::Checkpoint),
            _ => None,
        }
    }

    /// Commit and SystemCommit close a transaction's record group.
    pub fn ends_group(self) -> bool {
        matches!(self, LogRecordType::Commit | LogRecordType::SystemCommit)
    }
}

/// Size of the fixed header, i.e. everything before the payloads.
pub const HEADER_LEN: usize = 49;
/// Header plus trailing checksum: the size of a record with empty payloads.
pub const RECORD_OVERHEAD: usize = HEADER_LEN + 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub kind: LogRecordType,
    pub txn_id: TxnId,
    pub page_id: PageId,
    pub lsn: Lsn,
    pub prev_page_lsn: Lsn,
    pub vlsn: Vlsn,
    pub undo: Vec<u8>,
    pub redo: Vec<u8>,
}

/// A physical page image carried in an UNDO or REDO payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageImage<'a> {
    pub offset: u16,
    pub bytes: &'a [u8],
}

fn image_payload(offset: u16, bytes: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(2 + bytes.len());
    v.extend_from_slice(&offset.to_le_bytes());
    v.extend_from_slice(bytes);
    v
}

fn parse_image(payload: &[u8]) -> Option<PageImage<'_>> {
    if payload.len() < 2 {
        return None;
    }
    Some(PageImage {
        offset: u16::from_le_bytes([payload[0], payload[1]]),
        bytes: &payload[2..],
    })
}

impl LogRecord {
    pub fn update(txn_id: TxnId, page_id: PageId, offset: u16, before: &[u8], after: &[u8]) -> Self {
        debug_assert_eq!(before.len(), after.len());
        LogRecord {
            kind: LogRecordType::Update,
            txn_id,
            page_id,
            lsn: Lsn(0),
            prev_page_lsn: Lsn::NULL,
            vlsn: Vlsn::NONE,
            undo: image_payload(offset, before),
            redo: image_payload(offset, after),
        }
    }

    pub fn commit(txn_id: TxnId, system: bool) -> Self {
        LogRecord {
            kind: if system { LogRecordType::SystemCommit } else { LogRecordType::Commit },
            txn_id,
            page_id: PageId::NULL,
            lsn: Lsn(0),
            prev_page_lsn: Lsn::NULL,
            vlsn: Vlsn::NONE,
            undo: Vec::new(),
            redo: Vec::new(),
        }
    }

    /// A checkpoint listing `(page_id, redo-from lsn)` pairs.
    pub fn checkpoint(pages: &[(PageId, Lsn)]) -> Self {
        let mut redo = Vec::with_capacity(pages.len() * 16);
        for (pid, lsn) in pages {
            redo.extend_from_slice(&pid.0.to_le_bytes());
            redo.extend_from_slice(&lsn.0.to_le_bytes());
        }
        LogRecord {
            kind: LogRecordType::Checkpoint,
            txn_id: TxnId(0),
            page_id: PageId::NULL,
            lsn: Lsn(0),
            prev_page_lsn: Lsn::NULL,
            vlsn: Vlsn::NONE,
            undo: Vec::new(),
            redo,
        }
    }

    pub fn encoded_len(&self) -> usize {
        RECORD_OVERHEAD + self.undo.len() + self.redo.len()
    }

    pub fn undo_image(&self) -> Option<PageImage<'_>> {
        parse_image(&self.undo)
    }

    pub fn redo_image(&self) -> Option<PageImage<'_>> {
        parse_image(&self.redo)
    }

    pub fn checkpoint_pages(&self) -> Vec<(PageId, Lsn)> {
        if self.kind != LogRecordType::Checkpoint {
            return Vec::new();
        }
        self.redo
            .chunks_exact(16)
            .map(|c| {
                let pid = u64::from_le_bytes(c[0..8].try_into().unwrap());
                let lsn = u64::from_le_bytes(c[8..16].try_into().unwrap());
                (PageId(pid), Lsn(lsn))
            })
            .collect()
    }

    fn check_shape(&self) -> Result<()> {
        let ok = match self.kind {
            LogRecordType::Update => {
                !self.page_id.is_null()
                    && self.redo.len() > 2
                    && self.undo.len() == self.redo.len()
                    && self.undo[..2] == self.redo[..2]
            }
            LogRecordType::Commit | LogRecordType::SystemCommit => {
                self.page_id.is_null() && self.undo.is_empty() && self.redo.is_empty()
            }
            LogRecordType::Checkpoint => {
                self.page_id.is_null() && self.undo.is_empty() && self.redo.len().is_multiple_of(16)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(EngineError::Encoding(format!("malformed {:?} record", self.kind)))
        }
    }

    /// Appends the on-disk form of this record to `out`. The VLSN is
    /// volatile and always written as zero.
    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        self.check_shape()?;
        let undo_len = u16::try_from(self.undo.len())
            .map_err(|_| EngineError::Encoding(format!("undo payload of {} bytes", self.undo.len())))?;
        let redo_len = u16::try_from(self.redo.len())
            .map_err(|_| EngineError::Encoding(format!("redo payload of {} bytes", self.redo.len())))?;
        let total = self.encoded_len() as u32;
        let start = out.len();
        out.reserve(total as usize);
        out.extend_from_slice(&total.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&self.txn_id.0.to_le_bytes());
        out.extend_from_slice(&self.page_id.0.to_le_bytes());
        out.extend_from_slice(&self.lsn.0.to_le_bytes());
        out.extend_from_slice(&self.prev_page_lsn.0.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes());
        out.extend_from_slice(&undo_len.to_le_bytes());
        out.extend_from_slice(&redo_len.to_le_bytes());
        out.extend_from_slice(&self.undo);
        out.extend_from_slice(&self.redo);
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }
}

/// Result of decoding at a record boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decoded {
    /// A verified record and the number of bytes it occupies.
    Record(LogRecord, usize),
    /// The bytes do not hold a complete, intact record.
    TornTail,
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

pub fn decode(bytes: &[u8]) -> Decoded {
    if bytes.len() < RECORD_OVERHEAD {
        return Decoded::TornTail;
    }
    let total = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if total < RECORD_OVERHEAD || total > bytes.len() {
        return Decoded::TornTail;
    }
    let body = &bytes[..total - 4];
    let stored_crc = u32::from_le_bytes(bytes[total - 4..total].try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Decoded::TornTail;
    }
    let Some(kind) = LogRecordType::from_tag(body[4]) else {
        return Decoded::TornTail;
    };
    let undo_len = le_u16(body, 45) as usize;
    let redo_len = le_u16(body, 47) as usize;
    if HEADER_LEN + undo_len + redo_len + 4 != total {
        return Decoded::TornTail;
    }
    let undo_end = HEADER_LEN + undo_len;
    let rec = LogRecord {
        kind,
        txn_id: TxnId(le_u64(body, 5)),
        page_id: PageId(le_u64(body, 13)),
        lsn: Lsn(le_u64(body, 21)),
        prev_page_lsn: Lsn(le_u64(body, 29)),
        vlsn: Vlsn(le_u64(body, 37)),
        undo: body[HEADER_LEN..undo_end].to_vec(),
        redo: body[undo_end..undo_end + redo_len].to_vec(),
    };
    Decoded::Record(rec, total)
}

/// Decodes consecutive records from a byte sequence until the first torn
/// record. Returns the records and the number of bytes they span.
pub fn decode_all(bytes: &[u8]) -> (Vec<LogRecord>, usize) {
    let mut pos = 0;
    let mut out = Vec::new();
    while let Decoded::Record(rec, len) = decode(&bytes[pos..]) {
        out.push(rec);
        pos += len;
    }
    (out, pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn commit_record_size_is_header_arithmetic() {
        // total_len 4 + type 1 + txn 8 + page 8 + lsn 8 + prev 8 + vlsn 8
        // + undo_len 2 + redo_len 2 + crc 4
        let expected = 4 + 1 + 8 + 8 + 8 + 8 + 8 + 2 + 2 + 4;
        let bytes = LogRecord::commit(TxnId(7), false).encode().unwrap();
        assert_eq!(bytes.len(), expected);
        assert_eq!(bytes.len(), 53);
        assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 53);
    }

    #[test]
    fn update_record_size_counts_offset_prefixes() {
        let rec = LogRecord::update(TxnId(1), PageId(3), 100, &[1, 2, 3, 4], &[5, 6, 7, 8]);
        assert_eq!(rec.encoded_len(), RECORD_OVERHEAD + 6 + 6);
        assert_eq!(rec.encode().unwrap().len(), 65);
    }

    #[test]
    fn golden_commit_encoding() {
        let mut rec = LogRecord::commit(TxnId(7), false);
        rec.lsn = Lsn(0x0102);
        let bytes = rec.encode().unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(&53u32.to_le_bytes());
        expected.push(2);
        expected.extend_from_slice(&7u64.to_le_bytes());
        expected.extend_from_slice(&[0xff; 8]);
        expected.extend_from_slice(&0x0102u64.to_le_bytes());
        expected.extend_from_slice(&[0xff; 8]);
        expected.extend_from_slice(&[0; 8]);
        expected.extend_from_slice(&[0, 0, 0, 0]);
        let crc = crc32fast::hash(&expected);
        expected.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupted_crc_is_torn() {
        let mut bytes = LogRecord::commit(TxnId(7), false).encode().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x01;
        assert_eq!(decode(&bytes), Decoded::TornTail);
    }

    #[test]
    fn truncated_record_is_torn() {
        let rec = LogRecord::update(TxnId(1), PageId(3), 24, b"abcd", b"wxyz");
        let bytes = rec.encode().unwrap();
        assert_eq!(decode(&bytes[..bytes.len() - 1]), Decoded::TornTail);
        assert_eq!(decode(&[]), Decoded::TornTail);
    }

    #[test]
    fn flipped_payload_bit_is_torn() {
        let rec = LogRecord::update(TxnId(1), PageId(3), 24, b"abcd", b"wxyz");
        let mut bytes = rec.encode().unwrap();
        bytes[HEADER_LEN + 3] ^= 0x10;
        assert_eq!(decode(&bytes), Decoded::TornTail);
    }

    #[test]
    fn vlsn_is_not_persisted() {
        let mut rec = LogRecord::update(TxnId(1), PageId(3), 24, b"ab", b"cd");
        rec.vlsn = Vlsn(99);
        let Decoded::Record(back, _) = decode(&rec.encode().unwrap()) else {
            panic!("decode failed");
        };
        assert_eq!(back.vlsn, Vlsn(0));
    }

    #[test]
    fn oversized_payload_is_an_encoding_error() {
        let big = vec![0u8; 70_000];
        let rec = LogRecord::update(TxnId(1), PageId(3), 0, &big, &big);
        assert!(matches!(rec.encode(), Err(EngineError::Encoding(_))));
    }

    #[test]
    fn malformed_shapes_are_rejected() {
        let mut c = LogRecord::commit(TxnId(1), false);
        c.page_id = PageId(4);
        assert!(c.encode().is_err());
        let mut u = LogRecord::update(TxnId(1), PageId(3), 0, b"a", b"b");
        u.page_id = PageId::NULL;
        assert!(u.encode().is_err());
    }

    #[test]
    fn checkpoint_pages_round_trip() {
        let pages = vec![(PageId(4711), Lsn(200)), (PageId(3), Lsn::NULL)];
        let rec = LogRecord::checkpoint(&pages);
        let Decoded::Record(back, _) = decode(&rec.encode().unwrap()) else {
            panic!("decode failed");
        };
        assert_eq!(back.checkpoint_pages(), pages);
    }

    fn arb_record() -> impl Strategy<Value = LogRecord> {
        let update = (
            any::<u64>(),
            0u64..u64::MAX,
            any::<u16>(),
            prop::collection::vec(any::<u8>(), 1..64),
            any::<u64>(),
            any::<u64>(),
        )
            .prop_map(|(txn, page, off, before, lsn, prev)| {
                let after: Vec<u8> = before.iter().map(|b| b.wrapping_add(1)).collect();
                let mut r = LogRecord::update(TxnId(txn), PageId(page), off, &before, &after);
                r.lsn = Lsn(lsn);
                r.prev_page_lsn = Lsn(prev);
                r
            });
        let commit = (any::<u64>(), any::<bool>(), any::<u64>()).prop_map(|(txn, sys, lsn)| {
            let mut r = LogRecord::commit(TxnId(txn), sys);
            r.lsn = Lsn(lsn);
            r
        });
        let ckpt = prop::collection::vec((any::<u64>(), any::<u64>()), 0..8).prop_map(|v| {
            let pages: Vec<_> = v.into_iter().map(|(p, l)| (PageId(p), Lsn(l))).collect();
            LogRecord::checkpoint(&pages)
        });
        prop_oneof![update, commit, ckpt]
    }

    proptest! {
        #[test]
        fn round_trip(rec in arb_record(), vlsn in any::<u64>()) {
            let mut r = rec.clone();
            r.vlsn = Vlsn(vlsn);
            let bytes = r.encode().unwrap();
            prop_assert_eq!(decode(&bytes), Decoded::Record(rec, bytes.len()));
        }

        #[test]
        fn prefix_safety(recs in prop::collection::vec(arb_record(), 1..6), cut_frac in 0.0f64..1.0) {
            let mut bytes = Vec::new();
            let mut ends = Vec::new();
            for r in &recs {
                r.encode_into(&mut bytes).unwrap();
                ends.push(bytes.len());
            }
            let cut = (bytes.len() as f64 * cut_frac) as usize;
            let (decoded, span) = decode_all(&bytes[..cut]);
            let complete = ends.iter().filter(|&&e| e <= cut).count();
            prop_assert_eq!(decoded.len(), complete);
            prop_assert_eq!(&decoded[..], &recs[..complete]);
            let expected_span = if complete == 0 { 0 } else { ends[complete - 1] };
            prop_assert_eq!(span, expected_span);
            prop_assert_eq!(decode(&bytes[span..cut]), Decoded::TornTail);
        }
    }
}
