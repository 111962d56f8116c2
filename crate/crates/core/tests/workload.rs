use redo_core::sim::harness::{crash_test, random_crash_point, run_workload, WorkloadSpec};
use redo_core::{EngineConfig, FaultPlan};

fn show(r: &redo_core::sim::harness::RunReport) {
    for v in r.violations.iter().take(10) {
        eprintln!("{:?}: {}", v.kind, v.detail);
    }
}

#[test]
fn deterministic_run_is_clean() {
    let spec = WorkloadSpec { seed: 7, ..WorkloadSpec::default() };
    let out = run_workload(&spec);
    show(&out.report);
    assert!(out.report.ok());
    assert!(out.report.committed > 100);
    assert!(out.report.freeze_checks >= 50);
}

#[test]
fn deterministic_run_is_reproducible() {
    let spec = WorkloadSpec { seed: 11, txns: 60, ..WorkloadSpec::default() };
    let a = run_workload(&spec);
    let b = run_workload(&spec);
    assert_eq!(a.disk.freeze_and_inspect().log, b.disk.freeze_and_inspect().log);
    assert_eq!(a.report.committed, b.report.committed);
}

#[test]
fn crash_at_random_point_recovers() {
    for seed in 1..=10 {
        let mut spec = WorkloadSpec { seed, txns: 80, ..WorkloadSpec::default() };
        spec.crash = FaultPlan { crash_after_writes: Some(random_crash_point(&spec)), crash_seed: seed };
        let (r, _) = crash_test(&spec);
        show(&r);
        assert!(r.ok(), "seed {seed}");
    }
}

#[test]
fn threaded_run_with_daemons_is_clean() {
    let spec = WorkloadSpec {
        seed: 3,
        txns: 300,
        deterministic: false,
        engine: EngineConfig { checkpoint_interval: 40, pool_frames: 16, ..EngineConfig::default() },
        ..WorkloadSpec::default()
    };
    let out = run_workload(&spec);
    show(&out.report);
    assert!(out.report.ok());
}

#[test]
fn checks_detect_tampering() {
    use redo_core::sim::harness::{check_chains, freeze_check, ViolationKind};
    let spec = WorkloadSpec { seed: 5, txns: 60, ..WorkloadSpec::default() };
    let out = run_workload(&spec);
    assert!(out.report.ok());
    let engine = out.engine.unwrap();
    engine.shutdown().unwrap();
    assert!(freeze_check(&out.disk, &out.oracle).is_empty());
    assert!(check_chains(&out.disk, &out.oracle).is_empty());
    let pid = out.disk.page_ids()[0];
    let mut img = out.disk.read_page(pid).unwrap();
    img[100] ^= 0xff;
    out.disk.install_page(pid, &img);
    let v = freeze_check(&out.disk, &out.oracle);
    assert!(v.iter().any(|v| v.kind == ViolationKind::CommittedDisk));
    assert!(!redo_core::recovery::verify(&out.disk).is_clean());
}
