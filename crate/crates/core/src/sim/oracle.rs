//! Committed-state oracle.
//!
//! A deliberately naive bookkeeping model fed by the engine's observer
//! hooks and by the workload driver. It re-derives everything it checks on
//! its own: record sizes and LSNs from the on-disk header arithmetic, page
//! images by replaying byte ranges, the logical database by replaying the
//! acknowledged operations. It shares no logic with the engine, only the
//! plain id types used in the hook signatures.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use parking_lot::Mutex;

use crate::engine::EngineObserver;
use crate::log::{PageId, TxnId};
use crate::plog::CommitReceipt;

const PAGE: usize = 8192;
const NO_LSN: u64 = u64::MAX;
/// Fixed part of an encoded record: length, tag, four u64 fields, the
/// zeroed VLSN, two u16 lengths and the trailing crc.
const FIXED: u64 = 4 + 1 + 8 * 5 + 2 + 2 + 4;

/// Logical key: (page, slot).
pub type Key = (u64, u16);
pub type LogicalState = BTreeMap<Key, Vec<u8>>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LogicalOp {
    Put(Key, Vec<u8>),
    Delete(Key),
}

#[derive(Clone, Debug)]
struct PageWrite {
    page: u64,
    offset: usize,
    after: Vec<u8>,
}

impl PageWrite {
    fn size(&self) -> u64 {
        FIXED + 2 * (2 + self.after.len() as u64)
    }
}

#[derive(Default)]
struct Pending {
    writes: Vec<PageWrite>,
    ops: Vec<LogicalOp>,
    marks: Vec<(String, usize, usize)>,
}

/// One durable record group as the oracle reconstructs it.
#[derive(Clone, Debug)]
pub struct Group {
    pub txn: u64,
    pub start: u64,
    pub end: u64,
    /// (lsn, page, offset, after-image)
    pub writes: Vec<(u64, u64, usize, Vec<u8>)>,
    pub ops: Vec<LogicalOp>,
}

#[derive(Default)]
struct State {
    pending: HashMap<u64, Pending>,
    submitted: BTreeSet<u64>,
    groups: Vec<Group>,
    problems: Vec<String>,
}

#[derive(Default)]
pub struct Oracle {
    st: Mutex<State>,
}

fn apply(state: &mut LogicalState, op: &LogicalOp) {
    match op {
        LogicalOp::Put(k, v) => {
            state.insert(*k, v.clone());
        }
        LogicalOp::Delete(k) => {
            state.remove(k);
        }
    }
}

impl Oracle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a logical operation that succeeded inside `txn`.
    pub fn record_op(&self, txn: TxnId, op: LogicalOp) {
        self.st.lock().pending.entry(txn.0).or_default().ops.push(op);
    }

    pub fn savepoint(&self, txn: TxnId, name: &str) {
        let mut st = self.st.lock();
        let p = st.pending.entry(txn.0).or_default();
        let mark = (name.to_string(), p.writes.len(), p.ops.len());
        p.marks.push(mark);
    }

    pub fn rollback_to(&self, txn: TxnId, name: &str) {
        let mut st = self.st.lock();
        let p = st.pending.entry(txn.0).or_default();
        if let Some(i) = p.marks.iter().rposition(|m| m.0 == name) {
            let (_, w, o) = p.marks[i].clone();
            p.writes.truncate(w);
            p.ops.truncate(o);
            p.marks.truncate(i + 1);
        }
    }

    /// Forgets `txn`: it aborted, or committed without logging anything.
    pub fn abort(&self, txn: TxnId) {
        let mut st = self.st.lock();
        st.pending.remove(&txn.0);
        st.submitted.remove(&txn.0);
    }

    /// The driver is about to call commit for `txn`.
    pub fn commit_submitted(&self, txn: TxnId) {
        self.st.lock().submitted.insert(txn.0);
    }

    /// Transactions whose commit was submitted but never acknowledged as
    /// durable; after a crash each may or may not have survived.
    pub fn in_doubt(&self) -> Vec<u64> {
        self.st.lock().submitted.iter().copied().collect()
    }

    pub fn problems(&self) -> Vec<String> {
        self.st.lock().problems.clone()
    }

    pub fn groups(&self) -> Vec<Group> {
        self.st.lock().groups.clone()
    }

    pub fn committed_txns(&self) -> usize {
        self.st.lock().groups.len()
    }

    /// Logical state of all groups ending at or before `upto`.
    pub fn state_at(&self, upto: u64) -> LogicalState {
        let st = self.st.lock();
        let mut s = LogicalState::new();
        for g in st.groups.iter().filter(|g| g.end <= upto) {
            g.ops.iter().for_each(|op| apply(&mut s, op));
        }
        s
    }

    pub fn committed_state(&self) -> LogicalState {
        self.state_at(u64::MAX)
    }

    /// What `txn` should read for `key`: the committed value overlaid with
    /// its own pending operations.
    pub fn visible_to(&self, txn: TxnId, key: Key) -> Option<Vec<u8>> {
        let st = self.st.lock();
        let mut v = None;
        for g in &st.groups {
            for op in &g.ops {
                match op {
                    LogicalOp::Put(k, val) if *k == key => v = Some(val.clone()),
                    LogicalOp::Delete(k) if *k == key => v = None,
                    _ => {}
                }
            }
        }
        if let Some(p) = st.pending.get(&txn.0) {
            for op in &p.ops {
                match op {
                    LogicalOp::Put(k, val) if *k == key => v = Some(val.clone()),
                    LogicalOp::Delete(k) if *k == key => v = None,
                    _ => {}
                }
            }
        }
        v
    }

    /// Every acceptable post-crash logical state: the acknowledged state
    /// plus each subset of the in-doubt transactions.
    pub fn acceptable_states_after_crash(&self) -> Vec<LogicalState> {
        let st = self.st.lock();
        let mut base = LogicalState::new();
        for g in &st.groups {
            g.ops.iter().for_each(|op| apply(&mut base, op));
        }
        let doubt: Vec<&Pending> = st.submitted.iter().filter_map(|t| st.pending.get(t)).collect();
        let n = doubt.len().min(12);
        let mut out = Vec::with_capacity(1 << n);
        for mask in 0u32..(1 << n) {
            let mut s = base.clone();
            for (i, p) in doubt.iter().take(n).enumerate() {
                if mask & (1 << i) != 0 {
                    p.ops.iter().for_each(|op| apply(&mut s, op));
                }
            }
            out.push(s);
        }
        out
    }

    /// Expected bytes of `page` after replaying, onto a zero page, every
    /// committed write to it with LSN at most `l`.
    pub fn expected_page(&self, page: u64, l: u64) -> Vec<u8> {
        let st = self.st.lock();
        let mut img = vec![0u8; PAGE];
        img[..8].copy_from_slice(&NO_LSN.to_le_bytes());
        for g in &st.groups {
            for (lsn, p, off, after) in &g.writes {
                if *p == page && *lsn <= l {
                    img[*off..*off + after.len()].copy_from_slice(after);
                    img[..8].copy_from_slice(&lsn.to_le_bytes());
                }
            }
        }
        img
    }

    /// Expected bytes of `page` when only groups whose writes to it all lie
    /// at or below `l` count.
    pub fn expected_page_groups(&self, page: u64, l: u64) -> Vec<u8> {
        let st = self.st.lock();
        let mut img = vec![0u8; PAGE];
        img[..8].copy_from_slice(&NO_LSN.to_le_bytes());
        for g in &st.groups {
            let mine: Vec<_> = g.writes.iter().filter(|w| w.1 == page).collect();
            if mine.is_empty() || mine.iter().any(|w| w.0 > l) {
                continue;
            }
            for (lsn, _, off, after) in mine {
                img[*off..*off + after.len()].copy_from_slice(after);
                img[..8].copy_from_slice(&lsn.to_le_bytes());
            }
        }
        img
    }

    /// LSNs of all committed writes to `page`, ascending, with their txn.
    pub fn page_history(&self, page: u64) -> Vec<(u64, u64)> {
        let st = self.st.lock();
        let mut v: Vec<(u64, u64)> = st
            .groups
            .iter()
            .flat_map(|g| g.writes.iter().filter(|w| w.1 == page).map(move |w| (w.0, g.txn)))
            .collect();
        v.sort();
        v
    }

    pub fn pages(&self) -> BTreeSet<u64> {
        self.st.lock().groups.iter().flat_map(|g| g.writes.iter().map(|w| w.1)).collect()
    }
}

impl EngineObserver for Oracle {
    fn on_update(&self, txn: TxnId, page: PageId, offset: u16, _before: &[u8], after: &[u8]) {
        let w = PageWrite { page: page.0, offset: offset as usize, after: after.to_vec() };
        self.st.lock().pending.entry(txn.0).or_default().writes.push(w);
    }

    fn on_durable(&self, txn: TxnId, r: CommitReceipt) {
        let mut st = self.st.lock();
        st.submitted.remove(&txn.0);
        let p = st.pending.remove(&txn.0).unwrap_or_default();
        let mut at = r.start.0;
        let mut writes = Vec::with_capacity(p.writes.len());
        for w in &p.writes {
            writes.push((at, w.page, w.offset, w.after.clone()));
            at += w.size();
        }
        if at + FIXED != r.end.0 {
            st.problems.push(format!(
                "txn {}: group [{}, {}) but {} writes plus commit end at {}",
                txn.0,
                r.start.0,
                r.end.0,
                p.writes.len(),
                at + FIXED
            ));
        }
        st.groups.push(Group { txn: txn.0, start: r.start.0, end: r.end.0, writes, ops: p.ops });
    }
}

/// A record as read from raw log bytes by [`parse_raw_log`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub offset: u64,
    pub len: u64,
    pub tag: u8,
    pub txn: u64,
    pub page: u64,
    pub lsn: u64,
    pub prev: u64,
    pub undo_len: u16,
    pub redo_len: u16,
}

/// Splits raw log bytes into checksummed records; stops at the first byte
/// range that is not one.
pub fn parse_raw_log(bytes: &[u8]) -> (Vec<RawRecord>, u64) {
    let u64_at = |b: &[u8], i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
    let mut out = Vec::new();
    let mut pos = 0usize;
    while bytes.len() - pos >= FIXED as usize {
        let rest = &bytes[pos..];
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        if len < FIXED as usize || len > rest.len() {
            break;
        }
        let body = &rest[..len];
        let crc = u32::from_le_bytes(body[len - 4..].try_into().unwrap());
        if crc32fast::hash(&body[..len - 4]) != crc {
            break;
        }
        let undo_len = u16::from_le_bytes([body[45], body[46]]);
        let redo_len = u16::from_le_bytes([body[47], body[48]]);
        if FIXED as usize + undo_len as usize + redo_len as usize != len {
            break;
        }
        out.push(RawRecord {
            offset: pos as u64,
            len: len as u64,
            tag: body[4],
            txn: u64_at(body, 5),
            page: u64_at(body, 13),
            lsn: u64_at(body, 21),
            prev: u64_at(body, 29),
            undo_len,
            redo_len,
        });
        pos += len;
    }
    (out, pos as u64)
}

/// Checks that raw log bytes, after dropping a torn tail and a trailing
/// commit-less group, consist only of complete committed groups and
/// standalone checkpoints. Returns the committed end.
pub fn check_raw_log(bytes: &[u8]) -> Result<u64, String> {
    const UPDATE: u8 = 1;
    const COMMIT: u8 = 2;
    const SYS_COMMIT: u8 = 3;
    const CHECKPOINT: u8 = 4;
    let (recs, _) = parse_raw_log(bytes);
    let mut committed_end = 0;
    let mut open: Option<u64> = None;
    for r in &recs {
        if r.lsn != r.offset {
            return Err(format!("record at {} carries lsn {}", r.offset, r.lsn));
        }
        match r.tag {
            UPDATE => match open {
                Some(t) if t != r.txn => {
                    return Err(format!("txn {t} group interrupted by txn {} at {}", r.txn, r.offset));
                }
                _ => open = Some(r.txn),
            },
            COMMIT | SYS_COMMIT => {
                if open.is_some_and(|t| t != r.txn) {
                    return Err(format!("commit of txn {} at {} closes another txn's group", r.txn, r.offset));
                }
                open = None;
                committed_end = r.offset + r.len;
            }
            CHECKPOINT => {
                if open.is_some() {
                    return Err(format!("checkpoint at {} inside a group", r.offset));
                }
                committed_end = r.offset + r.len;
            }
            other => return Err(format!("record type {other} at {}", r.offset)),
        }
    }
    Ok(committed_end)
}
