//! Workload driver and invariant checks.
//!
//! A workload runs either on real threads (daemons on) or on one thread
//! that interleaves logical workers step by step under a seeded scheduler,
//! which makes a run a pure function of its seed.

use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{Engine, EngineConfig, EngineObserver, StatsSnapshot};
use crate::error::EngineError;
use crate::log::PageId;
use crate::page::MAX_PAYLOAD;
use crate::recovery::{self, RecoveryReport, Violation as VerifyViolation};
use crate::sim::disk::{FaultPlan, VirtualDisk};
use crate::sim::oracle::{check_raw_log, parse_raw_log, Key, LogicalOp, LogicalState, Oracle};
use crate::store::RecordId;
use crate::txn::Transaction;

/// Relative weights of the four record operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Mix {
    pub insert: u32,
    pub update: u32,
    pub delete: u32,
    pub read: u32,
}

impl Default for Mix {
    fn default() -> Self {
        Mix { insert: 40, update: 30, delete: 10, read: 20 }
    }
}

impl FromStr for Mix {
    type Err = String;

    /// Parses `insert,update,delete,read` weights, e.g. `40,30,10,20`.
    fn from_str(s: &str) -> Result<Self, String> {
        let w: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>().map_err(|e| format!("mix weight {p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        if w.len() != 4 || w.iter().all(|&x| x == 0) {
            return Err("mix needs four weights insert,update,delete,read, not all zero".into());
        }
        Ok(Mix { insert: w[0], update: w[1], delete: w[2], read: w[3] })
    }
}

#[derive(Clone, Debug)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub threads: usize,
    pub txns: usize,
    pub mix: Mix,
    pub abort_prob: f64,
    pub savepoint_prob: f64,
    pub max_ops: usize,
    /// Probability that a read goes through a fresh snapshot instead of a
    /// locked read.
    pub snapshot_read_prob: f64,
    /// Extra workers that only read through snapshots while writers run.
    pub snapshot_readers: usize,
    /// Probability of compacting a page after a transaction ends.
    pub compact_prob: f64,
    /// Single-threaded seeded interleaving instead of OS threads.
    pub deterministic: bool,
    /// Minimum number of committed-disk samples taken during the run.
    pub freeze_samples: usize,
    pub engine: EngineConfig,
    pub crash: FaultPlan,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            seed: 1,
            threads: 4,
            txns: 200,
            mix: Mix::default(),
            abort_prob: 0.1,
            savepoint_prob: 0.1,
            max_ops: 5,
            snapshot_read_prob: 0.1,
            snapshot_readers: 1,
            compact_prob: 0.02,
            deterministic: true,
            freeze_samples: 50,
            engine: EngineConfig { checkpoint_interval: 32, ..EngineConfig::deterministic() },
            crash: FaultPlan::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum ViolationKind {
    OracleMismatch,
    CommittedDisk,
    RedoOnly,
    LogFormat,
}

impl ViolationKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ViolationKind::OracleMismatch => 10,
            ViolationKind::CommittedDisk => 11,
            ViolationKind::RedoOnly => 12,
            ViolationKind::LogFormat => 13,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

fn violation(kind: ViolationKind, detail: impl Into<String>) -> Violation {
    Violation { kind, detail: detail.into() }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub committed: u64,
    pub aborted: u64,
    pub operations: u64,
    pub snapshot_reads: u64,
    pub in_doubt: usize,
    pub freeze_checks: u64,
    pub crashed: bool,
    pub disk_writes: u64,
    pub syncs: u64,
    pub elapsed_ms: f64,
    pub txn_per_sec: f64,
    pub stats: StatsSnapshot,
    pub recovery: Option<RecoveryReport>,
    pub violations: Vec<Violation>,
}

impl RunReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// 0 when clean, otherwise the code of the most severe violation kind.
    pub fn exit_code(&self) -> i32 {
        self.violations.iter().map(|v| v.kind).max().map_or(0, ViolationKind::exit_code)
    }
}

/// Result of [`run_workload`]: the report plus everything needed for
/// further checks.
pub struct RunOutcome {
    pub report: RunReport,
    pub engine: Option<Engine>,
    pub disk: VirtualDisk,
    pub oracle: Arc<Oracle>,
}

struct Ctx<'a> {
    engine: &'a Engine,
    oracle: &'a Oracle,
    spec: &'a WorkloadSpec,
    keys: Mutex<Vec<Key>>,
    violations: Mutex<Vec<Violation>>,
    committed: AtomicU64,
    aborted: AtomicU64,
    ops: AtomicU64,
    writers_left: AtomicU64,
    snapshot_reads: AtomicU64,
}

impl Ctx<'_> {
    fn flag(&self, kind: ViolationKind, detail: String) {
        self.violations.lock().push(violation(kind, detail));
    }
}

enum Step {
    Continue,
    Finished,
    Crashed,
}

struct Active {
    tx: Transaction,
    ops_left: usize,
    ops_done: usize,
    savepoint_at: Option<usize>,
    savepoint_taken: bool,
    rolled_back: bool,
}

struct Worker {
    rng: ChaCha8Rng,
    remaining: usize,
    active: Option<Active>,
    reader: bool,
}

fn key_of(rid: RecordId) -> Key {
    (rid.page.0, rid.slot)
}

fn rid_of(k: Key) -> RecordId {
    RecordId::new(PageId(k.0), k.1)
}

fn is_fatal(e: &EngineError) -> bool {
    matches!(e, EngineError::Crashed | EngineError::ShutDown | EngineError::Disk(_))
}

impl Worker {
    fn new(seed: u64, index: usize, txns: usize) -> Worker {
        let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64 + 1));
        Worker { rng, remaining: txns, active: None, reader: false }
    }

    fn reader(seed: u64, index: usize) -> Worker {
        Worker { reader: true, ..Worker::new(seed ^ 0x7ead_e700, index, 0) }
    }

    /// One lock-free read through a fresh snapshot, checked against the
    /// oracle's committed prefix at the snapshot's LSN.
    fn snapshot_read(&mut self, ctx: &Ctx) -> Step {
        if ctx.writers_left.load(Ordering::SeqCst) == 0 {
            return Step::Finished;
        }
        let Some(key) = self.pick_key(ctx) else {
            return Step::Continue;
        };
        ctx.snapshot_reads.fetch_add(1, Ordering::Relaxed);
        let snap = ctx.engine.snapshot();
        let want = ctx.oracle.state_at(snap.as_of().0).get(&key).cloned();
        match snap.read(rid_of(key)) {
            Ok(v) if Some(&v) == want.as_ref() => Step::Continue,
            Err(EngineError::NotFound(_)) if want.is_none() => Step::Continue,
            Err(e) if is_fatal(&e) => Step::Crashed,
            got => {
                ctx.flag(ViolationKind::OracleMismatch, format!("reader snapshot@{} of {}: {got:?}, expected {want:?}", snap.as_of(), rid_of(key)));
                Step::Continue
            }
        }
    }

    fn payload(&mut self) -> Vec<u8> {
        let len = if self.rng.gen_bool(0.1) { MAX_PAYLOAD } else { self.rng.gen_range(1..=96) };
        let tag = self.rng.gen::<u8>();
        (0..len).map(|i| tag.wrapping_add(i as u8)).collect()
    }

    fn abort_active(&mut self, ctx: &Ctx) -> Step {
        if let Some(a) = self.active.take() {
            ctx.oracle.abort(a.tx.id());
            match a.tx.abort() {
                Ok(()) => {
                    ctx.aborted.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) if is_fatal(&e) => return Step::Crashed,
                Err(e) => ctx.flag(ViolationKind::OracleMismatch, format!("abort failed: {e}")),
            }
        }
        Step::Continue
    }

    fn step(&mut self, ctx: &Ctx) -> Step {
        if self.reader {
            return self.snapshot_read(ctx);
        }
        let Some(a) = self.active.as_mut() else {
            if self.remaining == 0 {
                ctx.writers_left.fetch_sub(1, Ordering::SeqCst);
                return Step::Finished;
            }
            self.remaining -= 1;
            let tx = match ctx.engine.begin() {
                Ok(tx) => tx,
                Err(e) if is_fatal(&e) => return Step::Crashed,
                Err(e) => {
                    ctx.flag(ViolationKind::OracleMismatch, format!("begin failed: {e}"));
                    return Step::Continue;
                }
            };
            let ops_left = self.rng.gen_range(1..=ctx.spec.max_ops.max(1));
            let savepoint_at = self.rng.gen_bool(ctx.spec.savepoint_prob).then(|| self.rng.gen_range(0..ops_left));
            self.active = Some(Active { tx, ops_left, ops_done: 0, savepoint_at, savepoint_taken: false, rolled_back: false });
            return Step::Continue;
        };
        if a.savepoint_at == Some(a.ops_done) && !a.savepoint_taken {
            a.savepoint_taken = true;
            ctx.oracle.savepoint(a.tx.id(), "sp");
            return match a.tx.savepoint("sp") {
                Ok(()) => Step::Continue,
                Err(e) => self.fail(ctx, e),
            };
        }
        if a.ops_left > 0 {
            a.ops_left -= 1;
            a.ops_done += 1;
            return self.operation(ctx);
        }
        if a.savepoint_taken && !a.rolled_back {
            a.rolled_back = true;
            ctx.oracle.rollback_to(a.tx.id(), "sp");
            return match a.tx.rollback_to("sp") {
                Ok(()) => Step::Continue,
                Err(e) => self.fail(ctx, e),
            };
        }
        if self.rng.gen_bool(ctx.spec.abort_prob) {
            return self.abort_active(ctx);
        }
        let a = self.active.take().expect("active transaction");
        let id = a.tx.id();
        ctx.oracle.commit_submitted(id);
        match a.tx.commit() {
            Ok(receipt) => {
                if receipt.is_none() {
                    ctx.oracle.abort(id);
                }
                ctx.committed.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) if is_fatal(&e) => return Step::Crashed,
            Err(e) => ctx.flag(ViolationKind::OracleMismatch, format!("commit of {id} failed: {e}")),
        }
        if self.rng.gen_bool(ctx.spec.compact_prob) {
            let pages = ctx.engine.catalog_pages();
            if !pages.is_empty() {
                let pid = pages[self.rng.gen_range(0..pages.len())];
                if let Err(e) = ctx.engine.compact(pid) {
                    if is_fatal(&e) {
                        return Step::Crashed;
                    }
                    ctx.flag(ViolationKind::OracleMismatch, format!("compact {pid}: {e}"));
                }
            }
        }
        Step::Continue
    }

    fn fail(&mut self, ctx: &Ctx, e: EngineError) -> Step {
        if is_fatal(&e) {
            return Step::Crashed;
        }
        match e {
            EngineError::LockTimeout { .. } | EngineError::ResourceExhausted(_) => {}
            e => ctx.flag(ViolationKind::OracleMismatch, format!("operation failed: {e}")),
        }
        self.abort_active(ctx)
    }

    fn pick_key(&mut self, ctx: &Ctx) -> Option<Key> {
        let keys = ctx.keys.lock();
        (!keys.is_empty()).then(|| keys[self.rng.gen_range(0..keys.len())])
    }

    fn operation(&mut self, ctx: &Ctx) -> Step {
        ctx.ops.fetch_add(1, Ordering::Relaxed);
        let m = ctx.spec.mix;
        let total = m.insert + m.update + m.delete + m.read;
        let mut roll = self.rng.gen_range(0..total.max(1));
        let payload = self.payload();
        let snapshot = self.rng.gen_bool(ctx.spec.snapshot_read_prob);
        let key = self.pick_key(ctx);
        let a = self.active.as_mut().expect("active transaction");
        let txn = a.tx.id();
        if roll < m.insert || key.is_none() {
            return match a.tx.insert(&payload) {
                Ok(rid) => {
                    ctx.oracle.record_op(txn, LogicalOp::Put(key_of(rid), payload));
                    ctx.keys.lock().push(key_of(rid));
                    Step::Continue
                }
                Err(e) => self.fail(ctx, e),
            };
        }
        roll -= m.insert;
        let key = key.expect("checked above");
        let rid = rid_of(key);
        let res = if roll < m.update {
            a.tx.update(rid, &payload).map(|()| Some(LogicalOp::Put(key, payload)))
        } else if roll < m.update + m.delete {
            a.tx.delete(rid).map(|()| Some(LogicalOp::Delete(key)))
        } else if snapshot {
            let snap = ctx.engine.snapshot();
            let want = ctx.oracle.state_at(snap.as_of().0).get(&key).cloned();
            match snap.read(rid) {
                Ok(v) if Some(&v) == want.as_ref() => Ok(None),
                Err(EngineError::NotFound(_)) if want.is_none() => Ok(None),
                Err(e) if is_fatal(&e) => Err(e),
                got => {
                    ctx.flag(ViolationKind::OracleMismatch, format!("snapshot@{} read of {rid}: {got:?}, expected {want:?}", snap.as_of()));
                    Ok(None)
                }
            }
        } else {
            match a.tx.read(rid) {
                Ok(v) => {
                    let want = ctx.oracle.visible_to(txn, key);
                    if want.as_ref() != Some(&v) {
                        ctx.flag(ViolationKind::OracleMismatch, format!("{txn} read {rid}: {v:?}, expected {want:?}"));
                    }
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        };
        match res {
            Ok(Some(op)) => {
                ctx.oracle.record_op(txn, op);
                Step::Continue
            }
            Ok(None) => Step::Continue,
            Err(EngineError::NotFound(_)) => {
                if let Some(v) = ctx.oracle.visible_to(txn, key) {
                    ctx.flag(ViolationKind::OracleMismatch, format!("{txn}: {rid} not found, expected {} bytes", v.len()));
                }
                Step::Continue
            }
            Err(e) => self.fail(ctx, e),
        }
    }
}

/// Compares every raw disk page with the oracle's replay up to the page's
/// own PageLSN, and checks the raw log's group structure. Takes one atomic
/// snapshot of the disk.
pub fn freeze_check(disk: &VirtualDisk, oracle: &Oracle) -> Vec<Violation> {
    let view = disk.freeze_and_inspect();
    let mut out = Vec::new();
    for (pid, img) in &view.pages {
        let l = u64::from_le_bytes(img[..8].try_into().unwrap());
        let want = oracle.expected_page(pid.0, l);
        if want[..] != img[..] {
            let at = (0..want.len()).find(|&i| want[i] != img[i]).unwrap_or(0);
            out.push(violation(ViolationKind::CommittedDisk, format!("page {pid} at PageLSN {l} differs from oracle at byte {at}")));
        }
    }
    if let Err(e) = check_raw_log(&view.log) {
        out.push(violation(ViolationKind::LogFormat, e));
    }
    out
}

/// Walks each disk page's `prev_page_lsn` chain through the raw log and
/// compares it with the oracle's history of that page.
pub fn check_chains(disk: &VirtualDisk, oracle: &Oracle) -> Vec<Violation> {
    let view = disk.freeze_and_inspect();
    let (recs, _) = parse_raw_log(&view.log);
    let by_offset: std::collections::HashMap<u64, _> = recs.iter().map(|r| (r.offset, r)).collect();
    let mut out = Vec::new();
    for (pid, img) in &view.pages {
        let mut cur = u64::from_le_bytes(img[..8].try_into().unwrap());
        let top = cur;
        let mut chain = Vec::new();
        while cur != u64::MAX {
            match by_offset.get(&cur) {
                Some(r) if r.tag == 1 && r.page == pid.0 => {
                    chain.push((r.lsn, r.txn));
                    cur = r.prev;
                }
                _ => {
                    out.push(violation(ViolationKind::CommittedDisk, format!("page {pid}: chain link {cur} is not an update of this page")));
                    break;
                }
            }
        }
        let mut want: Vec<(u64, u64)> = oracle.page_history(pid.0).into_iter().filter(|(l, _)| *l <= top).collect();
        want.reverse();
        if chain != want {
            out.push(violation(ViolationKind::CommittedDisk, format!("page {pid}: chain {chain:?} but committed history {want:?}")));
        }
        let mut seen = std::collections::HashSet::new();
        let mut last = None;
        for &(_, t) in &chain {
            if last != Some(t) && !seen.insert(t) {
                out.push(violation(ViolationKind::CommittedDisk, format!("page {pid}: records of txn {t} are not adjacent")));
                break;
            }
            last = Some(t);
        }
    }
    out
}

fn engine_state(engine: &Engine) -> Result<LogicalState, EngineError> {
    Ok(engine.dump_records()?.into_iter().map(|(rid, v)| (key_of(rid), v)).collect())
}

fn describe_diff(got: &LogicalState, want: &LogicalState) -> String {
    let missing = want.keys().filter(|k| !got.contains_key(k)).count();
    let extra = got.keys().filter(|k| !want.contains_key(k)).count();
    let changed = want.iter().filter(|(k, v)| got.get(*k).is_some_and(|g| g != *v)).count();
    format!("{} records, expected {}: {missing} missing, {extra} unexpected, {changed} different", got.len(), want.len())
}

/// Runs a workload on a fresh disk with `spec.crash` as its fault plan.
pub fn run_workload(spec: &WorkloadSpec) -> RunOutcome {
    run_on(spec, VirtualDisk::with_plan(spec.crash))
}

fn run_on(spec: &WorkloadSpec, disk: VirtualDisk) -> RunOutcome {
    let oracle = Arc::new(Oracle::new());
    let mut report = RunReport { seed: spec.seed, ..RunReport::default() };
    let observer: Arc<dyn EngineObserver> = Arc::clone(&oracle) as Arc<dyn EngineObserver>;
    let engine = match Engine::open_with_observer(disk.clone(), spec.engine.clone(), Some(observer)) {
        Ok(e) => e,
        Err(e) => {
            report.crashed = is_fatal(&e);
            if !report.crashed {
                report.violations.push(violation(ViolationKind::OracleMismatch, format!("open failed: {e}")));
            }
            return RunOutcome { report, engine: None, disk, oracle };
        }
    };
    let started = Instant::now();
    let ctx = Ctx {
        engine: &engine,
        oracle: &oracle,
        spec,
        keys: Mutex::new(Vec::new()),
        violations: Mutex::new(Vec::new()),
        committed: AtomicU64::new(0),
        aborted: AtomicU64::new(0),
        ops: AtomicU64::new(0),
        writers_left: AtomicU64::new(spec.threads.max(1) as u64),
        snapshot_reads: AtomicU64::new(0),
    };
    let threads = spec.threads.max(1);
    let readers = spec.snapshot_readers;
    let share = |i: usize| spec.txns / threads + usize::from(i < spec.txns % threads);
    let checks = AtomicU64::new(0);
    let sample = |ctx: &Ctx| {
        checks.fetch_add(1, Ordering::Relaxed);
        let v = freeze_check(&disk, &oracle);
        ctx.violations.lock().extend(v);
    };
    let crashed = if spec.deterministic {
        let mut workers: Vec<Worker> = (0..threads)
            .map(|i| Worker::new(spec.seed, i, share(i)))
            .chain((0..readers).map(|i| Worker::reader(spec.seed, i)))
            .collect();
        let mut sched = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5c4e_d01e);
        let est_steps = (spec.txns * (spec.max_ops + 4) / 2).max(1);
        let every = (est_steps / (2 * spec.freeze_samples.max(1))).max(1) as u32;
        let mut live: Vec<usize> = (0..threads + readers).collect();
        let mut crashed = false;
        while !live.is_empty() && !crashed {
            let i = sched.gen_range(0..live.len());
            match workers[live[i]].step(&ctx) {
                Step::Continue => {}
                Step::Finished => {
                    live.swap_remove(i);
                }
                Step::Crashed => crashed = true,
            }
            if sched.gen_ratio(1, every) {
                sample(&ctx);
            }
            if !crashed && sched.gen_bool(0.05) {
                if let Err(e) = engine.clean_pass(2) {
                    crashed = is_fatal(&e);
                }
            }
        }
        drop(workers);
        crashed
    } else {
        let crashed = AtomicBool::new(false);
        let running = AtomicU64::new((threads + readers) as u64);
        std::thread::scope(|s| {
            for i in 0..threads + readers {
                let (ctx, crashed, running) = (&ctx, &crashed, &running);
                s.spawn(move || {
                    let mut w = if i < threads { Worker::new(spec.seed, i, share(i)) } else { Worker::reader(spec.seed, i - threads) };
                    loop {
                        match w.step(ctx) {
                            Step::Continue => {}
                            Step::Finished => break,
                            Step::Crashed => {
                                crashed.store(true, Ordering::SeqCst);
                                ctx.writers_left.store(0, Ordering::SeqCst);
                                break;
                            }
                        }
                    }
                    drop(w);
                    running.fetch_sub(1, Ordering::SeqCst);
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xf00d);
            while running.load(Ordering::SeqCst) > 0 {
                std::thread::sleep(Duration::from_micros(rng.gen_range(0..400)));
                sample(&ctx);
            }
        });
        crashed.into_inner()
    };
    while checks.load(Ordering::Relaxed) < spec.freeze_samples as u64 {
        sample(&ctx);
    }
    let elapsed = started.elapsed();
    report.crashed = crashed || engine.phase() == crate::engine::Phase::Crashed;
    report.committed = ctx.committed.load(Ordering::Relaxed);
    report.aborted = ctx.aborted.load(Ordering::Relaxed);
    report.operations = ctx.ops.load(Ordering::Relaxed);
    report.snapshot_reads = ctx.snapshot_reads.load(Ordering::Relaxed);
    report.freeze_checks = checks.load(Ordering::Relaxed);
    report.in_doubt = oracle.in_doubt().len();
    report.elapsed_ms = elapsed.as_secs_f64() * 1e3;
    report.txn_per_sec = report.committed as f64 / elapsed.as_secs_f64().max(1e-9);
    report.violations.extend(ctx.violations.into_inner());
    report
        .violations
        .extend(oracle.problems().into_iter().map(|p| violation(ViolationKind::OracleMismatch, p)));
    if !report.crashed {
        match engine_state(&engine) {
            Ok(got) => {
                let want = oracle.committed_state();
                if got != want {
                    report.violations.push(violation(ViolationKind::OracleMismatch, format!("live state: {}", describe_diff(&got, &want))));
                }
            }
            Err(e) => report.violations.push(violation(ViolationKind::OracleMismatch, format!("dump failed: {e}"))),
        }
    }
    report.stats = engine.stats();
    let c = disk.counters();
    report.disk_writes = c.writes;
    report.syncs = c.syncs;
    RunOutcome { report, engine: Some(engine), disk, oracle }
}

/// Checks a recovered engine against the oracle and the REDO-only rules.
pub fn check_recovered(engine: &Engine, oracle: &Oracle) -> Vec<Violation> {
    let mut out = Vec::new();
    let rr = engine.recovery_report();
    if rr.undo_ops_during_recovery != 0 || engine.stats().undo_ops_during_recovery != 0 {
        out.push(violation(ViolationKind::RedoOnly, format!("{} undo operations during recovery", rr.undo_ops_during_recovery)));
    }
    let view = engine.disk().freeze_and_inspect();
    let (recs, end) = parse_raw_log(&view.log);
    if end != view.log.len() as u64 {
        out.push(violation(ViolationKind::LogFormat, format!("recovered log has {} unparsable tail bytes", view.log.len() as u64 - end)));
    }
    if let Some(r) = recs.iter().find(|r| !(1..=4).contains(&r.tag)) {
        out.push(violation(ViolationKind::RedoOnly, format!("record type {} at {}", r.tag, r.offset)));
    }
    if let Err(e) = check_raw_log(&view.log) {
        out.push(violation(ViolationKind::LogFormat, e));
    }
    for v in recovery::verify(engine.disk()).violations {
        out.push(match v {
            VerifyViolation::LogFormat(d) => violation(ViolationKind::LogFormat, d),
            VerifyViolation::CommittedDisk { page, detail } => violation(ViolationKind::CommittedDisk, format!("page {page}: {detail}")),
        });
    }
    match engine_state(engine) {
        Ok(got) => {
            let options = oracle.acceptable_states_after_crash();
            if !options.contains(&got) {
                out.push(violation(ViolationKind::OracleMismatch, format!("recovered state: {}", describe_diff(&got, &options[0]))));
            }
        }
        Err(e) => out.push(violation(ViolationKind::OracleMismatch, format!("dump after recovery failed: {e}"))),
    }
    out
}

/// Number of disk writes the workload performs without a crash.
pub fn count_writes(spec: &WorkloadSpec) -> u64 {
    let mut dry = spec.clone();
    dry.crash = FaultPlan { crash_after_writes: None, crash_seed: spec.crash.crash_seed };
    dry.freeze_samples = 0;
    let out = run_workload(&dry);
    out.disk.counters().writes
}

/// Runs the workload, crashes it (at the planned write, or at the end),
/// recovers from what survives and checks the result against the oracle.
pub fn crash_test(spec: &WorkloadSpec) -> (RunReport, Option<Engine>) {
    let out = run_workload(spec);
    let mut report = out.report;
    if let Some(e) = out.engine {
        e.halt();
    }
    let image = out.disk.crash_image();
    let recovered_cfg = EngineConfig { cleaner_interval: None, ..spec.engine.clone() };
    match Engine::open(image, recovered_cfg) {
        Ok(engine) => {
            report.violations.extend(check_recovered(&engine, &out.oracle));
            report.recovery = Some(engine.recovery_report().clone());
            report.stats.undo_ops_during_recovery += engine.stats().undo_ops_during_recovery;
            (report, Some(engine))
        }
        Err(e) => {
            let kind = if matches!(e, EngineError::Integrity(_)) { ViolationKind::LogFormat } else { ViolationKind::OracleMismatch };
            report.violations.push(violation(kind, format!("recovery failed: {e}")));
            (report, None)
        }
    }
}

/// Picks the crash point for a seed uniformly among the writes a
/// crash-free run would perform.
pub fn random_crash_point(spec: &WorkloadSpec) -> u64 {
    let total = count_writes(spec).max(1);
    ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc4a5_4000).gen_range(1..=total)
}
