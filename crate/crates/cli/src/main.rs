//! `redoctl`: drive workloads and crash tests against the engine, and
//! inspect disk images.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use redo_core::plog::LogScan;
use redo_core::recovery::{self, Violation};
use redo_core::sim::harness::{crash_test, random_crash_point, run_workload, Mix, RunReport, WorkloadSpec};
use redo_core::{Engine, EngineConfig, FaultPlan, LogRecordType, Lsn, RecordId, VirtualDisk};
use serde_json::{json, Value};

const EXIT_USAGE: u8 = 2;
const EXIT_ORACLE: u8 = 10;
const EXIT_COMMITTED_DISK: u8 = 11;
const EXIT_LOG_FORMAT: u8 = 13;

#[derive(Parser)]
#[command(name = "redoctl", version, about = "Workloads, crash tests and disk inspection for the REDO-only storage engine")]
struct Cli {
    /// Print a machine-readable JSON report instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload against a fresh disk and check it against the oracle.
    Workload {
        #[command(flatten)]
        spec: SpecArgs,
        /// Save the disk image here after a clean shutdown.
        #[arg(long)]
        disk: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Schedule::Threaded)]
        schedule: Schedule,
    },
    /// Run a workload, crash it, recover and compare with the oracle.
    CrashTest {
        #[command(flatten)]
        spec: SpecArgs,
        /// Crash once this many disk writes have succeeded. Chosen from the
        /// seed when omitted.
        #[arg(long)]
        crash_after_writes: Option<u64>,
        /// Seeds how much unsynced log survives the crash.
        #[arg(long)]
        crash_seed: Option<u64>,
        /// Save the recovered disk image here.
        #[arg(long)]
        disk: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Schedule::Deterministic)]
        schedule: Schedule,
    },
    /// Read-only log analysis and per-page chain check of a disk image.
    Verify { disk: PathBuf },
    /// Print the log records of a disk image with their chain links.
    DumpLog {
        disk: PathBuf,
        /// First LSN to print.
        #[arg(long, default_value_t = 0)]
        from: u64,
        /// Stop after this many records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Recover a disk image, take a checkpoint and save it back.
    Checkpoint { disk: PathBuf },
    /// Read one record, optionally as of an earlier LSN.
    Read {
        disk: PathBuf,
        /// Record id as PAGE:SLOT.
        rid: RecordId,
        #[arg(long)]
        as_of: Option<u64>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Schedule {
    /// One thread, seeded interleaving; reproducible.
    Deterministic,
    /// Real threads with the commit daemon and cleaner running.
    Threaded,
}

#[derive(Args, Clone)]
struct SpecArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long, default_value_t = 200)]
    txns: usize,
    /// Operation weights as insert,update,delete,read.
    #[arg(long, default_value = "40,30,10,20")]
    mix: Mix,
    #[arg(long, default_value_t = 0.1)]
    abort_prob: f64,
    #[arg(long, default_value_t = 0.1)]
    savepoint_prob: f64,
    #[arg(long, default_value_t = 1)]
    snapshot_readers: usize,
    #[arg(long, default_value_t = 256)]
    checkpoint_interval: u64,
    /// Milliseconds a single-page rollback may wait for a committing log.
    #[arg(long, default_value_t = 0)]
    spr_wait: u64,
    #[arg(long, default_value_t = 1024)]
    pool_frames: usize,
    /// Bytes per volatile log extent.
    #[arg(long, default_value_t = 64 * 1024)]
    extent_size: usize,
    /// Group commit window in milliseconds.
    #[arg(long, default_value_t = 1)]
    commit_window: u64,
}

fn check_prob(name: &str, p: f64) -> Result<(), String> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(format!("--{name} must be within 0..=1, got {p}"))
    }
}

impl SpecArgs {
    fn to_spec(&self, schedule: Schedule) -> Result<WorkloadSpec, String> {
        check_prob("abort-prob", self.abort_prob)?;
        check_prob("savepoint-prob", self.savepoint_prob)?;
        if self.threads == 0 || self.pool_frames < 2 {
            return Err("--threads must be positive and --pool-frames at least 2".into());
        }
        if self.extent_size < 1024 {
            return Err("--extent-size must be at least 1024 bytes".into());
        }
        let base = match schedule {
            Schedule::Deterministic => EngineConfig::deterministic(),
            Schedule::Threaded => EngineConfig::default(),
        };
        let engine = EngineConfig {
            checkpoint_interval: self.checkpoint_interval,
            spr_wait: Duration::from_millis(self.spr_wait),
            pool_frames: self.pool_frames,
            extent_size: self.extent_size,
            group_commit_window: Duration::from_millis(self.commit_window),
            ..base
        };
        Ok(WorkloadSpec {
            seed: self.seed,
            threads: self.threads,
            txns: self.txns,
            mix: self.mix,
            abort_prob: self.abort_prob,
            savepoint_prob: self.savepoint_prob,
            snapshot_readers: self.snapshot_readers,
            deterministic: schedule == Schedule::Deterministic,
            engine,
            ..WorkloadSpec::default()
        })
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_USAGE, message: message.into() }
    }
}

fn load(path: &Path) -> Result<VirtualDisk, Failure> {
    VirtualDisk::load(path).map_err(|e| Failure::usage(e.to_string()))
}

fn save(disk: &VirtualDisk, path: &Path) -> Result<(), Failure> {
    disk.save(path).map_err(|e| Failure::usage(e.to_string()))
}

fn open(disk: VirtualDisk) -> Result<Engine, Failure> {
    let cfg = EngineConfig { cleaner_interval: None, ..EngineConfig::deterministic() };
    Engine::open(disk, cfg).map_err(|e| Failure { code: EXIT_LOG_FORMAT, message: format!("recovery failed: {e}") })
}

fn print_run(report: &RunReport, json: bool) {
    if json {
        let verdict = if report.ok() { "ok" } else { "mismatch" };
        println!("{}", json!({ "verdict": verdict, "exit_code": report.exit_code(), "report": report }));
        return;
    }
    println!(
        "seed {}: {} committed, {} aborted, {} operations, {} snapshot reads, {:.0} txn/s",
        report.seed, report.committed, report.aborted, report.operations, report.snapshot_reads, report.txn_per_sec
    );
    println!(
        "disk: {} writes, {} syncs; {} freeze checks; crashed: {}; in-doubt commits: {}",
        report.disk_writes, report.syncs, report.freeze_checks, report.crashed, report.in_doubt
    );
    if let Some(r) = &report.recovery {
        println!(
            "recovery: redo from {} to {}, {} applied, {} skipped, {} torn bytes dropped, {} undo operations",
            r.analysis.redo_start,
            r.analysis.valid_end,
            r.redo_applied,
            r.redo_skipped,
            r.truncated_bytes,
            r.undo_ops_during_recovery
        );
    }
    if report.ok() {
        println!("oracle check: ok");
    } else {
        println!("oracle check: {} violations", report.violations.len());
        for v in &report.violations {
            println!("  {:?}: {}", v.kind, v.detail);
        }
    }
}

fn cmd_workload(spec: &WorkloadSpec, path: Option<&Path>, json: bool) -> Result<u8, Failure> {
    let out = run_workload(spec);
    let mut report = out.report;
    if let Some(engine) = out.engine {
        if let Err(e) = engine.shutdown() {
            report.violations.push(redo_core::sim::harness::Violation {
                kind: redo_core::sim::harness::ViolationKind::OracleMismatch,
                detail: format!("shutdown failed: {e}"),
            });
        }
    }
    if let Some(p) = path {
        save(&out.disk, p)?;
    }
    print_run(&report, json);
    Ok(report.exit_code() as u8)
}

fn cmd_crash_test(mut spec: WorkloadSpec, after: Option<u64>, seed: Option<u64>, path: Option<&Path>, json: bool) -> Result<u8, Failure> {
    let crash_seed = seed.unwrap_or(spec.seed);
    let point = after.unwrap_or_else(|| random_crash_point(&spec));
    spec.crash = FaultPlan { crash_after_writes: Some(point), crash_seed };
    let (report, engine) = crash_test(&spec);
    if let (Some(p), Some(engine)) = (path, engine) {
        let disk = engine.disk().clone();
        engine.shutdown().map_err(|e| Failure { code: EXIT_ORACLE, message: e.to_string() })?;
        save(&disk, p)?;
    }
    if !json {
        println!("crash after {point} writes (crash seed {crash_seed})");
    }
    print_run(&report, json);
    Ok(report.exit_code() as u8)
}

fn cmd_verify(path: &Path, json: bool) -> Result<u8, Failure> {
    let disk = load(path)?;
    let report = recovery::verify(&disk);
    let code = report
        .violations
        .iter()
        .map(|v| match v {
            Violation::LogFormat(_) => EXIT_LOG_FORMAT,
            Violation::CommittedDisk { .. } => EXIT_COMMITTED_DISK,
        })
        .max()
        .unwrap_or(0);
    if json {
        println!("{}", json!({ "verdict": if code == 0 { "ok" } else { "violation" }, "exit_code": code, "report": report }));
        return Ok(code);
    }
    if let Some(a) = &report.analysis {
        let cp = a.checkpoint.map_or_else(|| "none".to_string(), |c| c.to_string());
        println!("checkpoint: {cp}; committed log end: {}; torn tail: {} bytes", a.valid_end, a.tail_bytes);
        println!("in-doubt pages: {}; redo would start at {}", a.in_doubt.len(), a.redo_start);
    }
    println!("pages checked: {}", report.pages_checked);
    for v in &report.violations {
        match v {
            Violation::LogFormat(d) => println!("log format violation: {d}"),
            Violation::CommittedDisk { page, detail } => println!("page {page}: {detail}"),
        }
    }
    println!("{}", if code == 0 { "ok" } else { "violations found" });
    Ok(code)
}

fn kind_name(k: LogRecordType) -> &'static str {
    match k {
        LogRecordType::Update => "Update",
        LogRecordType::Commit => "Commit",
        LogRecordType::SystemCommit => "SystemCommit",
        LogRecordType::Checkpoint => "Checkpoint",
    }
}

fn cmd_dump_log(path: &Path, from: u64, limit: Option<usize>, json: bool) -> Result<u8, Failure> {
    let disk = load(path)?;
    let mut scan = LogScan::new(disk.read_log_tail(0), 0);
    let mut rows: Vec<Value> = Vec::new();
    let mut shown = 0usize;
    for (at, rec) in scan.by_ref() {
        if at.0 < from {
            continue;
        }
        if limit.is_some_and(|n| shown >= n) {
            break;
        }
        shown += 1;
        let end = at.0 + rec.encoded_len() as u64;
        let mut row = json!({
            "lsn": at.0,
            "end": end,
            "type": kind_name(rec.kind),
            "txn": rec.txn_id.0,
        });
        match rec.kind {
            LogRecordType::Update => {
                let redo = rec.redo_image();
                row["page"] = json!(rec.page_id.0);
                row["prev_page_lsn"] = if rec.prev_page_lsn.is_null() { Value::Null } else { json!(rec.prev_page_lsn.0) };
                row["offset"] = json!(redo.as_ref().map(|r| r.offset));
                row["len"] = json!(redo.as_ref().map(|r| r.bytes.len()));
            }
            LogRecordType::Checkpoint => {
                row["pages"] = rec.checkpoint_pages().iter().map(|(p, l)| json!([p.0, l.0])).collect();
            }
            _ => {}
        }
        if !json {
            let text = match rec.kind {
                LogRecordType::Update => format!(
                    "{:>8}  Update        txn {:<5} page {:<5} prev {:<8} off {} len {}",
                    at.to_string(),
                    rec.txn_id.0,
                    rec.page_id.0,
                    rec.prev_page_lsn.to_string(),
                    row["offset"],
                    row["len"]
                ),
                LogRecordType::Checkpoint => {
                    format!("{:>8}  Checkpoint    next txn {:<5} unpropagated {}", at.to_string(), rec.txn_id.0, row["pages"])
                }
                k => format!("{:>8}  {:<13} txn {}", at.to_string(), kind_name(k), rec.txn_id.0),
            };
            println!("{text}");
        }
        rows.push(row);
    }
    let parsed = scan.end().0;
    let len = disk.log_len();
    if json {
        println!("{}", json!({ "records": rows, "parsed_end": parsed, "log_len": len, "master": disk.master().map(|m| m.0) }));
    } else {
        println!("-- {} records shown; log {} bytes, parsed to {}, master {:?}", rows.len(), len, parsed, disk.master());
    }
    Ok(0)
}

fn cmd_checkpoint(path: &Path, json: bool) -> Result<u8, Failure> {
    let disk = load(path)?;
    let engine = open(disk.clone())?;
    let failed = |e: redo_core::EngineError| Failure { code: EXIT_ORACLE, message: e.to_string() };
    let lsn = engine.take_checkpoint().map_err(failed)?;
    let report = engine.recovery_report().clone();
    engine.shutdown().map_err(failed)?;
    save(&disk, path)?;
    if json {
        println!("{}", json!({ "checkpoint_lsn": lsn.0, "recovery": report }));
    } else {
        println!("checkpoint at {lsn} (recovery redid {} records)", report.redo_applied);
    }
    Ok(0)
}

fn cmd_read(path: &Path, rid: RecordId, as_of: Option<u64>, json: bool) -> Result<u8, Failure> {
    let engine = open(load(path)?)?;
    let snap = match as_of {
        Some(l) => engine.snapshot_at(Lsn(l)).map_err(|e| Failure::usage(format!("--as-of {l}: {e}")))?,
        None => engine.snapshot(),
    };
    let value = match snap.read(rid) {
        Ok(v) => Some(v),
        Err(redo_core::EngineError::NotFound(_)) => None,
        Err(e) => return Err(Failure { code: EXIT_ORACLE, message: e.to_string() }),
    };
    let hex = |v: &[u8]| v.iter().map(|b| format!("{b:02x}")).collect::<String>();
    if json {
        println!(
            "{}",
            json!({ "rid": rid.to_string(), "as_of": snap.as_of().0, "found": value.is_some(), "hex": value.as_deref().map(hex) })
        );
    } else {
        match &value {
            Some(v) => println!("{rid} @ {}: {} bytes {}", snap.as_of(), v.len(), hex(v)),
            None => println!("{rid} @ {}: not found", snap.as_of()),
        }
    }
    engine.halt();
    Ok(if value.is_some() { 0 } else { 1 })
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let json = cli.json;
    match cli.cmd {
        Command::Workload { spec, disk, schedule } => {
            let spec = spec.to_spec(schedule).map_err(Failure::usage)?;
            cmd_workload(&spec, disk.as_deref(), json)
        }
        Command::CrashTest { spec, crash_after_writes, crash_seed, disk, schedule } => {
            let spec = spec.to_spec(schedule).map_err(Failure::usage)?;
            cmd_crash_test(spec, crash_after_writes, crash_seed, disk.as_deref(), json)
        }
        Command::Verify { disk } => cmd_verify(&disk, json),
        Command::DumpLog { disk, from, limit } => cmd_dump_log(&disk, from, limit, json),
        Command::Checkpoint { disk } => cmd_checkpoint(&disk, json),
        Command::Read { disk, rid, as_of } => cmd_read(&disk, rid, as_of, json),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("redoctl: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
