use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn redoctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_redoctl")).args(args).output().expect("run redoctl")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn crash_test_is_deterministic_per_seed() {
    let run = || {
        let out = redoctl(&["crash-test", "--seed", "42", "--txns", "80", "--json"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let mut v = json_of(&out);
        let r = v["report"].as_object_mut().unwrap();
        r.remove("elapsed_ms");
        r.remove("txn_per_sec");
        v
    };
    let a = run();
    assert_eq!(a["verdict"], "ok");
    assert_eq!(a, run());
}

#[test]
fn verify_after_recovery_finds_no_in_doubt_pages() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("recovered.img");
    let out = redoctl(&["crash-test", "--seed", "7", "--txns", "60", "--disk", path(&img)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let out = redoctl(&["verify", path(&img), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert_eq!(v["report"]["analysis"]["in_doubt"].as_object().unwrap().len(), 0);
    assert!(v["report"]["pages_checked"].as_u64().unwrap() > 0);
}

#[test]
fn dump_log_shows_contiguous_groups_ending_in_commit() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("w.img");
    let out = redoctl(&["workload", "--schedule", "deterministic", "--seed", "5", "--txns", "40", "--disk", path(&img)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let v = json_of(&redoctl(&["dump-log", path(&img), "--json"]));
    let recs = v["records"].as_array().unwrap();
    assert_eq!(v["parsed_end"], v["log_len"]);
    let mut open: Option<(u64, u64)> = None;
    let mut groups = 0;
    for r in recs {
        let (lsn, end, txn) = (r["lsn"].as_u64().unwrap(), r["end"].as_u64().unwrap(), r["txn"].as_u64().unwrap());
        match r["type"].as_str().unwrap() {
            "Update" => {
                if let Some((t, next)) = open {
                    assert_eq!((t, next), (txn, lsn), "group of {t} interrupted at {lsn}");
                }
                open = Some((txn, end));
            }
            "Commit" | "SystemCommit" => {
                let (t, next) = open.take().expect("commit without updates");
                assert_eq!((t, next), (txn, lsn));
                groups += 1;
            }
            _ => assert!(open.is_none(), "checkpoint inside a group"),
        }
    }
    assert!(open.is_none());
    assert!(groups > 10);

    let text = String::from_utf8(redoctl(&["dump-log", path(&img), "--limit", "3"]).stdout).unwrap();
    let golden = "       0  Checkpoint    next txn 1     unpropagated []\n      53  Update        txn 2     page 1     prev NULL     off 8 len 12\n     134  SystemCommit  txn 2\n";
    assert!(text.starts_with(golden), "{text}");
}

#[test]
fn read_supports_time_travel() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("w.img");
    redoctl(&["workload", "--schedule", "deterministic", "--seed", "2", "--txns", "30", "--mix", "1,0,0,0", "--abort-prob", "0", "--disk", path(&img)]);
    let now = json_of(&redoctl(&["read", path(&img), "1:0", "--json"]));
    assert_eq!(now["found"], true);
    let past = json_of(&redoctl(&["read", path(&img), "1:0", "--as-of", "53", "--json"]));
    assert_eq!(past["found"], false);
    let bad = redoctl(&["read", path(&img), "1:0", "--as-of", "999999999"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn checkpoint_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("w.img");
    redoctl(&["workload", "--schedule", "deterministic", "--seed", "4", "--txns", "30", "--disk", path(&img)]);
    let out = redoctl(&["checkpoint", path(&img), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let lsn = json_of(&out)["checkpoint_lsn"].as_u64().unwrap();
    let v = json_of(&redoctl(&["verify", path(&img), "--json"]));
    assert!(v["report"]["analysis"]["checkpoint"].as_u64().unwrap() >= lsn);
}

#[test]
fn exit_codes() {
    assert_eq!(redoctl(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(redoctl(&["workload", "--abort-prob", "1.5"]).status.code(), Some(2));
    assert_eq!(redoctl(&["verify", "/nonexistent/disk.img"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("w.img");
    redoctl(&["workload", "--schedule", "deterministic", "--seed", "3", "--txns", "30", "--disk", path(&img)]);
    let mut bytes = std::fs::read(&img).unwrap();
    let n = bytes.len();
    bytes[n - 100] ^= 0x5a;
    std::fs::write(&img, &bytes).unwrap();
    let out = redoctl(&["verify", path(&img)]);
    assert_eq!(out.status.code(), Some(11), "{}", String::from_utf8_lossy(&out.stdout));
}
