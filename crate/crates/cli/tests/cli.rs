use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "T": 20,
  "epochs": 1,
  "batch_size": 4,
  "base_width": 4,
  "n_train": 8,
  "n_val": 3,
  "n_test_normal": 2,
  "n_test_anomalous": 2
}"#;

fn addm(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_addm"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("ADDM_SEED");
    if let Some(s) = seed {
        cmd.env("ADDM_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let (data, run, samples, res) = (d.join("data"), d.join("run"), d.join("samples"), d.join("res"));

    ok(addm(&["gen-data", "--config", p(&config), "--out", p(&data)], None));
    for f in ["train.json", "val.json", "test.json", "effective_config.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    ok(addm(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run)], None));
    let ckpt = run.join("final.addm");
    assert!(ckpt.is_file() && run.join("train_log.csv").is_file());

    ok(addm(&["sample", "--ckpt", p(&ckpt), "--n", "2", "--out", p(&samples)], None));
    assert!(samples.join("samples.adtf").is_file() && samples.join("samples.pgm").is_file());

    ok(addm(&["detect", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&res), "--t-ad", "5"], None));
    let metrics = d.join("metrics.json");
    let out = ok(addm(&["eval", "--results", p(&res), "--out", p(&metrics)], None));
    let table: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["Dice", "AUC", "IoU", "Precision", "Recall"] {
        assert!(table[key].is_number(), "{key} missing from {table}");
    }
    assert!(metrics.is_file());
}

#[test]
fn seed_env_controls_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let (data, run) = (d.join("data"), d.join("run"));
    ok(addm(&["gen-data", "--config", p(&config), "--out", p(&data)], None));
    ok(addm(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run)], None));
    let ckpt = run.join("final.addm");
    let draw = |seed: &str, name: &str| {
        let out = d.join(name);
        ok(addm(&["sample", "--ckpt", p(&ckpt), "--n", "1", "--out", p(&out)], Some(seed)));
        std::fs::read(out.join("samples.adtf")).unwrap()
    };
    assert_eq!(draw("5", "a"), draw("5", "b"));
    assert_ne!(draw("5", "c"), draw("6", "d"));

    let out = addm(&["sample", "--ckpt", p(&ckpt), "--n", "1", "--out", p(&d.join("e"))], Some("abc"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(addm(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(addm(&["--help"], None).status.code(), Some(0));

    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"lambda": -1}"#).unwrap();
    let out = addm(&["gen-data", "--config", p(&bad), "--out", p(&d.join("x"))], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));

    let missing = d.join("nope.json");
    let out = addm(&["gen-data", "--config", p(&missing), "--out", p(&d.join("x"))], None);
    assert_eq!(out.status.code(), Some(2));

    let garbage = d.join("garbage.addm");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = addm(&["sample", "--ckpt", p(&garbage), "--n", "1", "--out", p(&d.join("s"))], None);
    assert_eq!(out.status.code(), Some(2));
}
