use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

use granu::checkpoint::Checkpoint;
use granu::dataset::Dataset;

fn granu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_granu"))
        .args(args)
        .env_remove("GRANU_LOG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = granu(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"), dir.path().join("c.jsonl"));
    ok(&["gen-data", "--dataset", s(&a), "--seed", "7", "--count", "12", "--mixture", "0.5,0.25,0.25"]);
    ok(&["gen-data", "--dataset", s(&b), "--seed", "7", "--count", "12", "--mixture", "0.5,0.25,0.25"]);
    ok(&["gen-data", "--dataset", s(&c), "--seed", "8", "--count", "12", "--mixture", "0.5,0.25,0.25"]);
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
    let data = Dataset::read_from(&a[..]).unwrap();
    assert_eq!(data.samples.len(), 12);
}

#[test]
fn train_eval_and_ablate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let ck = dir.path().join("m.ckpt");
    ok(&["gen-data", "--dataset", s(&data), "--count", "4", "--withhold", "dog", "--mixture", "0.5,0,0.5"]);
    let msg = ok(&["train", "--dataset", s(&data), "--checkpoint", s(&ck), "--steps", "3", "--strategy", "many2one"]);
    assert!(msg.contains("many2one"), "{msg}");
    let log = std::fs::read_to_string(ck.with_extension("csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,lr,"));
    let first = Checkpoint::load(&ck).unwrap();
    assert_eq!(first.step, 3);

    // identical flags, identical checkpoint bytes
    let again = dir.path().join("again.ckpt");
    ok(&["train", "--dataset", s(&data), "--checkpoint", s(&again), "--steps", "3", "--strategy", "many2one"]);
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&again).unwrap());

    let kv = ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&ck), "--clicks", "3", "--kv", "--transfer", "dog"]);
    let kv: HashMap<&str, f64> = kv
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k, v.parse().unwrap())
        })
        .collect();
    assert!(kv["point_oracle_1iou"] >= kv["point_max_1iou"]);
    assert_eq!(kv["clicks"], 12.0);
    assert!((kv["part_transfer_chance"] - 1.0 / 7.0).abs() < 1e-6);
    let table = ok(&["eval", "--dataset", s(&data), "--checkpoint", s(&ck)]);
    assert!(table.contains("oracle"));

    let ab = ok(&["ablate", "--dataset", s(&data), "--steps", "2", "--heldout", "2"]);
    assert!(ab.contains("many2one") && ab.contains("many2many"), "{ab}");
    assert!(ab.contains("all granularity, depth>=2"));
}

#[test]
fn exit_codes_separate_io_from_contract_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = granu(&["eval", "--dataset", s(&missing), "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));

    let data = dir.path().join("d.jsonl");
    ok(&["gen-data", "--dataset", s(&data), "--count", "2"]);
    let ck = dir.path().join("m.ckpt");
    let out = granu(&["train", "--dataset", s(&data), "--checkpoint", s(&ck), "--steps", "4", "--mixture", "0,1,0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ObjectLevel"));

    let out = granu(&["train", "--dataset", s(&data), "--checkpoint", s(&ck), "--strategy", "one2two"]);
    assert_eq!(out.status.code(), Some(1));
    let out = granu(&["gen-data", "--dataset", s(&data), "--mixture", "0.5,0.6,0"]);
    assert_eq!(out.status.code(), Some(1));
    let out = granu(&["gen-data", "--dataset", s(&data), "--withhold", "zebra"]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(&ck, b"GRNU1 but not really").unwrap();
    let out = granu(&["eval", "--dataset", s(&data), "--checkpoint", s(&ck)]);
    assert_eq!(out.status.code(), Some(1));
}
