//! Restart: log analysis, then a REDO pass over in-doubt pages. Nothing is
//! ever undone.

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;

use serde::Serialize;

use crate::engine::Shared;
use crate::error::{EngineError, Result};
use crate::log::{LogRecordType, Lsn, PageId, TxnId};
use crate::page::{self, PageBytes};
use crate::plog::{read_record_at, LogScan};
use crate::sim::disk::VirtualDisk;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AnalysisResult {
    /// Checkpoint the scan started from, if the master named a readable one.
    pub checkpoint: Option<Lsn>,
    pub redo_start: Lsn,
    /// Page → earliest LSN whose record may need redo.
    pub in_doubt: BTreeMap<PageId, Lsn>,
    /// Byte after the last complete committed group.
    pub valid_end: Lsn,
    /// Bytes found on disk past `valid_end`.
    pub tail_bytes: u64,
    /// Largest transaction id seen (checkpoints carry the high-water mark).
    pub max_txn: u64,
    pub records_scanned: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub analysis: AnalysisResult,
    pub truncated_bytes: u64,
    pub redo_applied: u64,
    pub redo_skipped: u64,
    pub pages_flushed: usize,
    pub undo_ops_during_recovery: u64,
}

fn integrity(msg: String) -> EngineError {
    EngineError::Integrity(msg)
}

/// Scans the log from the last checkpoint (or 0), finds the end of the
/// committed prefix and the pages that may lag it on disk.
pub fn analyze(disk: &VirtualDisk) -> Result<AnalysisResult> {
    let mut res = AnalysisResult::default();
    let master = disk
        .master()
        .filter(|&m| read_record_at(disk, m).map(|r| r.kind == LogRecordType::Checkpoint).unwrap_or(false));
    let start = master.unwrap_or(Lsn(0));
    res.checkpoint = master;
    res.valid_end = start;
    let mut scan = LogScan::new(disk.read_log_tail(start.0), start.0);
    let mut group: Option<(TxnId, Vec<(PageId, Lsn)>)> = None;
    for (at, rec) in scan.by_ref() {
        res.records_scanned += 1;
        if rec.lsn != at {
            return Err(integrity(format!("record at offset {at} claims lsn {}", rec.lsn)));
        }
        res.max_txn = res.max_txn.max(rec.txn_id.0);
        let end = Lsn(at.0 + rec.encoded_len() as u64);
        match rec.kind {
            LogRecordType::Update => match &mut group {
                Some((t, pages)) if *t == rec.txn_id => pages.push((rec.page_id, at)),
                Some((t, _)) => {
                    return Err(integrity(format!("group of {t} has no commit record before {at}")));
                }
                None => group = Some((rec.txn_id, vec![(rec.page_id, at)])),
            },
            LogRecordType::Commit | LogRecordType::SystemCommit => {
                if let Some((t, pages)) = group.take() {
                    if t != rec.txn_id {
                        return Err(integrity(format!("commit of {} at {at} closes a group of {t}", rec.txn_id)));
                    }
                    for (pid, lsn) in pages {
                        res.in_doubt.entry(pid).or_insert(lsn);
                    }
                }
                res.valid_end = end;
            }
            LogRecordType::Checkpoint => {
                if let Some((t, _)) = &group {
                    return Err(integrity(format!("checkpoint at {at} inside a group of {t}")));
                }
                if Some(at) == master {
                    for (pid, lsn) in rec.checkpoint_pages() {
                        let e = res.in_doubt.entry(pid).or_insert(lsn);
                        *e = (*e).min(lsn);
                    }
                }
                res.valid_end = end;
            }
        }
    }
    if let Some((t, pages)) = &group {
        // A trailing group without its commit record is a loser; it must be
        // the last thing in the log.
        let first = pages.first().map(|p| p.1).unwrap_or(res.valid_end);
        if first != res.valid_end {
            return Err(integrity(format!("loser group of {t} does not start at the committed end")));
        }
    }
    res.tail_bytes = disk.log_len().saturating_sub(res.valid_end.0);
    res.redo_start = res
        .in_doubt
        .values()
        .map(|&l| if l.is_null() { Lsn(0) } else { l })
        .min()
        .unwrap_or(res.valid_end);
    Ok(res)
}

/// REDO pass, flush of recovered pages and a fresh checkpoint. Runs with
/// the engine in its recovering phase.
pub(crate) fn restart(shared: &Shared, a: &AnalysisResult) -> Result<RecoveryReport> {
    let mut report = RecoveryReport { analysis: a.clone(), ..RecoveryReport::default() };
    if !a.in_doubt.is_empty() {
        let scan = LogScan::new(shared.disk.read_log_tail(a.redo_start.0), a.redo_start.0);
        for (at, rec) in scan {
            if at >= a.valid_end {
                break;
            }
            if rec.kind != LogRecordType::Update || !a.in_doubt.contains_key(&rec.page_id) {
                continue;
            }
            let page = shared.fetch(rec.page_id, true)?;
            let mut f = page.write();
            let pl = f.page_lsn();
            if !pl.is_null() && rec.lsn <= pl {
                report.redo_skipped += 1;
                continue;
            }
            if rec.prev_page_lsn != pl {
                return Err(integrity(format!(
                    "redo of {} at {at}: chain link {} but page is at {pl}",
                    rec.page_id, rec.prev_page_lsn
                )));
            }
            let img = rec.redo_image().ok_or_else(|| integrity(format!("update at {at} without redo image")))?;
            page::apply_image(&mut f.page, img.offset, img.bytes);
            page::set_page_lsn(&mut f.page, rec.lsn);
            if f.rec_lsn.is_null() {
                f.rec_lsn = rec.lsn;
            }
            report.redo_applied += 1;
        }
    }
    shared.stats.redo_applied.fetch_add(report.redo_applied, Ordering::Relaxed);
    report.pages_flushed = shared.clean_pass(usize::MAX)?;
    shared.take_checkpoint()?;
    report.undo_ops_during_recovery = shared.stats.undo_ops_during_recovery.load(Ordering::Relaxed);
    Ok(report)
}

/// A broken invariant found by [`verify`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Violation {
    /// The log does not parse into complete committed groups.
    LogFormat(String),
    /// A disk page differs from the state its PageLSN names.
    CommittedDisk { page: PageId, detail: String },
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub analysis: Option<AnalysisResult>,
    pub pages_checked: usize,
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Read-only check of a disk: log analysis plus, for each page, a replay
/// of its per-page chain compared against the stored image.
pub fn verify(disk: &VirtualDisk) -> VerifyReport {
    let analysis = match analyze(disk) {
        Ok(a) => a,
        Err(e) => {
            return VerifyReport { analysis: None, pages_checked: 0, violations: vec![Violation::LogFormat(e.to_string())] };
        }
    };
    let mut violations = Vec::new();
    let pages = disk.page_ids();
    for &pid in &pages {
        let img = match disk.read_page(pid) {
            Ok(img) => img,
            Err(e) => {
                violations.push(Violation::CommittedDisk { page: pid, detail: e.to_string() });
                continue;
            }
        };
        if let Err(detail) = check_page_chain(disk, pid, &img, analysis.valid_end) {
            violations.push(Violation::CommittedDisk { page: pid, detail });
        }
    }
    VerifyReport { analysis: Some(analysis), pages_checked: pages.len(), violations }
}

/// Rebuilds `pid` from a blank page by replaying its chain, and compares.
pub fn check_page_chain(disk: &VirtualDisk, pid: PageId, img: &PageBytes, valid_end: Lsn) -> Result<(), String> {
    let mut chain = Vec::new();
    let mut cur = page::page_lsn(img);
    while !cur.is_null() {
        if cur >= valid_end {
            return Err(format!("chain link {cur} beyond the committed log end {valid_end}"));
        }
        let rec = read_record_at(disk, cur).map_err(|e| format!("chain link {cur}: {e}"))?;
        if rec.page_id != pid || rec.kind != LogRecordType::Update {
            return Err(format!("chain link {cur} is a {:?} record of page {}", rec.kind, rec.page_id));
        }
        if !rec.prev_page_lsn.is_null() && rec.prev_page_lsn >= cur {
            return Err(format!("chain link {cur} points forward to {}", rec.prev_page_lsn));
        }
        cur = rec.prev_page_lsn;
        chain.push(rec);
    }
    let mut expect = page::blank_page();
    for rec in chain.iter().rev() {
        let r = rec.redo_image().ok_or_else(|| format!("record at {} has no redo image", rec.lsn))?;
        page::apply_image(&mut expect, r.offset, r.bytes);
        page::set_page_lsn(&mut expect, rec.lsn);
    }
    if expect[..] != img[..] {
        let first = (0..page::PAGE_SIZE).find(|&i| expect[i] != img[i]).unwrap_or(0);
        return Err(format!("image differs from its chain replay at byte {first}"));
    }
    Ok(())
}
