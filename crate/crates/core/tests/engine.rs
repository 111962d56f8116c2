use std::time::Duration;

use redo_core::locks::LockMode;
use redo_core::page::{self, MAX_PAYLOAD, SLOTS_PER_PAGE};
use redo_core::{Engine, EngineConfig, EngineError, Lsn, RecordId, VirtualDisk};

fn engine() -> (Engine, VirtualDisk) {
    let disk = VirtualDisk::new();
    (Engine::open(disk.clone(), EngineConfig::deterministic()).unwrap(), disk)
}

#[test]
fn insert_read_update_delete() {
    let (engine, _) = engine();
    let mut tx = engine.begin().unwrap();
    let rid = tx.insert(b"hello").unwrap();
    assert_eq!(tx.read(rid).unwrap(), b"hello");
    tx.update(rid, b"a longer value than before").unwrap();
    tx.update(rid, b"short").unwrap();
    assert_eq!(tx.read(rid).unwrap(), b"short");
    tx.commit().unwrap();
    let mut tx = engine.begin().unwrap();
    tx.delete(rid).unwrap();
    assert!(matches!(tx.read(rid), Err(EngineError::NotFound(_))));
    tx.commit().unwrap();
    assert!(engine.dump_records().unwrap().is_empty());
}

#[test]
fn full_pages_spill_to_a_new_page() {
    let (engine, _) = engine();
    let mut tx = engine.begin().unwrap();
    let rids: Vec<RecordId> = (0..SLOTS_PER_PAGE + 2).map(|i| tx.insert(&[i as u8; MAX_PAYLOAD]).unwrap()).collect();
    tx.commit().unwrap();
    assert_eq!(rids[SLOTS_PER_PAGE - 1].page, rids[0].page);
    assert_ne!(rids[SLOTS_PER_PAGE].page, rids[0].page);
    assert_eq!(engine.catalog_pages().len(), 2);
}

#[test]
fn oversized_payload_is_rejected() {
    let (engine, _) = engine();
    let mut tx = engine.begin().unwrap();
    assert!(matches!(tx.insert(&vec![0; MAX_PAYLOAD + 1]), Err(EngineError::PayloadTooLarge(_))));
    tx.insert(&vec![1; MAX_PAYLOAD]).unwrap();
}

#[test]
fn savepoint_rollback_keeps_earlier_work() {
    let (engine, _) = engine();
    let mut tx = engine.begin().unwrap();
    let a = tx.insert(b"a").unwrap();
    tx.savepoint("sp").unwrap();
    tx.update(a, b"changed").unwrap();
    let b = tx.insert(b"b").unwrap();
    tx.rollback_to("sp").unwrap();
    assert_eq!(tx.read(a).unwrap(), b"a");
    assert!(matches!(tx.read(b), Err(EngineError::NotFound(_))));
    assert!(matches!(tx.rollback_to("nope"), Err(EngineError::UnknownSavepoint(_))));
    tx.commit().unwrap();
    let recs = engine.dump_records().unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[&a], b"a");
}

#[test]
fn conflicting_writer_times_out() {
    let disk = VirtualDisk::new();
    let engine = Engine::open(disk, EngineConfig { lock_timeout: Duration::from_millis(20), ..EngineConfig::deterministic() }).unwrap();
    let mut t1 = engine.begin().unwrap();
    let rid = t1.insert(b"x").unwrap();
    let mut t2 = engine.begin().unwrap();
    assert!(matches!(t2.update(rid, b"y"), Err(EngineError::LockTimeout { .. })));
    assert!(t1.holds(rid, LockMode::Exclusive));
    t1.commit().unwrap();
    t2.update(rid, b"y").unwrap();
    t2.commit().unwrap();
}

#[test]
fn flush_excludes_uncommitted_updates() {
    let (engine, disk) = engine();
    let mut t0 = engine.begin().unwrap();
    let rid = t0.insert(b"committed").unwrap();
    t0.commit().unwrap();
    let mut t1 = engine.begin().unwrap();
    t1.update(rid, b"dirty").unwrap();
    assert!(engine.flush_page(rid.page).unwrap());
    let img = disk.read_page(rid.page).unwrap();
    assert_eq!(page::cell_payload(&img, rid.slot), Some(&b"committed"[..]));
    assert_eq!(page::cell_payload(&engine.buffer_image(rid.page).unwrap(), rid.slot), Some(&b"dirty"[..]));
    assert!(engine.stats().spr_undos > 0);
    t1.abort().unwrap();
    assert_eq!(page::cell_payload(&engine.buffer_image(rid.page).unwrap(), rid.slot), Some(&b"committed"[..]));
    assert!(!engine.flush_page(rid.page).unwrap(), "nothing new to write");
}

#[test]
fn small_pool_evicts_only_committed_pages() {
    let disk = VirtualDisk::new();
    let engine = Engine::open(disk, EngineConfig { pool_frames: 3, ..EngineConfig::deterministic() }).unwrap();
    let mut rids = Vec::new();
    for round in 0..8u8 {
        let mut tx = engine.begin().unwrap();
        for _ in 0..SLOTS_PER_PAGE {
            rids.push(tx.insert(&[round; 32]).unwrap());
        }
        tx.commit().unwrap();
    }
    assert!(engine.resident_pages().len() <= 3);
    let recs = engine.dump_records().unwrap();
    assert_eq!(recs.len(), rids.len());

    let mut holders = Vec::new();
    for rid in rids.iter().step_by(SLOTS_PER_PAGE).take(3) {
        let mut tx = engine.begin().unwrap();
        tx.update(*rid, b"pinned by an open transaction").unwrap();
        holders.push(tx);
    }
    let mut tx = engine.begin().unwrap();
    let far = rids[rids.len() - 1];
    assert!(matches!(tx.read(far), Err(EngineError::ResourceExhausted(_))));
    drop(holders);
    assert_eq!(tx.read(far).unwrap(), vec![7u8; 32]);
}

#[test]
fn snapshot_ignores_later_and_uncommitted_work() {
    let (engine, _) = engine();
    let mut tx = engine.begin().unwrap();
    let rid = tx.insert(b"v1").unwrap();
    tx.commit().unwrap();
    let snap = engine.snapshot();
    let mut tx = engine.begin().unwrap();
    tx.update(rid, b"v2").unwrap();
    assert_eq!(engine.snapshot().read(rid).unwrap(), b"v1");
    tx.commit().unwrap();
    assert_eq!(snap.read(rid).unwrap(), b"v1");
    assert_eq!(engine.snapshot().read(rid).unwrap(), b"v2");
    let old = engine.snapshot_at(snap.as_of()).unwrap();
    assert_eq!(old.read(rid).unwrap(), b"v1");
    assert!(engine.snapshot_at(Lsn(engine.durable_lsn().0 + 1)).is_err());
    assert!(engine.fix_at(rid.page, Lsn(engine.durable_lsn().0 + 1)).is_err());
}

#[test]
fn compaction_frees_deleted_cells() {
    let (engine, _) = engine();
    let mut tx = engine.begin().unwrap();
    let rid = tx.insert(b"gone").unwrap();
    tx.commit().unwrap();
    let mut tx = engine.begin().unwrap();
    tx.delete(rid).unwrap();
    assert_eq!(engine.compact(rid.page).unwrap(), 0, "lock still held");
    tx.commit().unwrap();
    assert_eq!(engine.compact(rid.page).unwrap(), 1);
    let mut tx = engine.begin().unwrap();
    assert_eq!(tx.insert(b"reuse").unwrap(), rid);
}

#[test]
fn group_commit_batches_concurrent_commits() {
    let disk = VirtualDisk::new();
    let engine = Engine::open(disk, EngineConfig { group_commit_window: Duration::from_millis(5), ..EngineConfig::default() }).unwrap();
    engine.allocate_page().unwrap();
    engine.allocate_page().unwrap();
    std::thread::scope(|s| {
        for i in 0..16u8 {
            let engine = &engine;
            s.spawn(move || {
                let mut tx = engine.begin().unwrap();
                tx.insert(&[i]).unwrap();
                tx.commit().unwrap();
            });
        }
    });
    let st = engine.stats();
    assert!(st.batches < st.commits, "{st:?}");
    engine.shutdown().unwrap();
}

#[test]
fn shut_down_and_crashed_engines_refuse_work() {
    let disk = VirtualDisk::new();
    let engine = Engine::open(disk.clone(), EngineConfig::deterministic()).unwrap();
    engine.shutdown().unwrap();
    let engine = Engine::open(disk.clone(), EngineConfig::deterministic()).unwrap();
    let mut tx = engine.begin().unwrap();
    tx.insert(b"x").unwrap();
    disk.crash();
    assert!(matches!(tx.commit(), Err(EngineError::Crashed) | Err(EngineError::Disk(_))));
    assert!(matches!(engine.begin(), Err(EngineError::Crashed)));
}

#[test]
fn commit_during_spr_wait_is_undone_in_the_copy() {
    let disk = VirtualDisk::new();
    let cfg = EngineConfig { spr_wait: Duration::from_millis(30), ..EngineConfig::deterministic() };
    let engine = Engine::open(disk.clone(), cfg).unwrap();
    let mut t0 = engine.begin().unwrap();
    let rid = t0.insert(b"old").unwrap();
    t0.commit().unwrap();
    engine.flush_page(rid.page).unwrap();
    let before = engine.frame_state(rid.page).unwrap().page_lsn;
    let mut t1 = engine.begin().unwrap();
    t1.update(rid, b"new").unwrap();
    std::thread::scope(|s| {
        let flusher = s.spawn(|| engine.flush_page(rid.page).unwrap());
        std::thread::sleep(Duration::from_millis(5));
        t1.commit().unwrap();
        flusher.join().unwrap();
    });
    let img = disk.read_page(rid.page).unwrap();
    assert_eq!(page::page_lsn(&img), before);
    assert_eq!(page::cell_payload(&img, rid.slot), Some(&b"old"[..]));
    assert!(engine.flush_page(rid.page).unwrap());
    let img = disk.read_page(rid.page).unwrap();
    assert_eq!(page::cell_payload(&img, rid.slot), Some(&b"new"[..]));
}
