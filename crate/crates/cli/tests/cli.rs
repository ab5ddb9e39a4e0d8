use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "input_size = 16\nbase_channels = 2\nepochs = 2\nfold_count = 2\naugment = false\n";

fn wnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wnet"))
        .current_dir(dir)
        .args(["--log", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wnet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), &["synth", "--out", "data", "--count", "8", "--size", "32", "--seed", "3"]);
    dir
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file under `dir` except reproducibility records, with contents.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_train_eval_end_to_end() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["train", "--config", "tiny.toml", "--manifest", "data/manifest.csv", "--out", "run"]);
    assert!(d.join("run/model.wnt").exists());
    assert!(d.join("run/trace.csv").exists());
    ok(d, &[
        "eval", "--config", "tiny.toml", "--manifest", "data/manifest.csv", "--checkpoint", "run/model.wnt", "--out", "ev",
    ]);
    let r = report(&d.join("ev/report.json"));
    for task in ["od", "ex"] {
        assert_eq!(r["aggregate"][task]["images"], 8);
        let f1 = r["aggregate"][task]["task_f1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f1));
    }
    assert_eq!(r["images"].as_array().unwrap().len(), 8);
    assert_eq!(std::fs::read_dir(d.join("ev/overlays")).unwrap().count(), 16);

    let record = report(&d.join("run/run.json"));
    assert_eq!(record["command"], "train");
    assert_eq!(record["seed"], 0);
    assert_eq!(record["config_hash"].as_str().unwrap().len(), 64);
    assert!(record["version"].is_string());
}

#[test]
fn eval_of_ground_truth_scores_one() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["eval", "--manifest", "data/manifest.csv", "--predictions", "data/manifest.csv", "--out", "ev"]);
    let r = report(&d.join("ev/report.json"));
    for task in ["od", "ex"] {
        assert_eq!(r["aggregate"][task]["task_f1"].as_f64(), Some(1.0), "{task}");
    }
}

#[test]
fn predict_then_eval_matches_checkpoint_eval() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["train", "--config", "tiny.toml", "--manifest", "data/manifest.csv", "--out", "run"]);
    let ck = ["--config", "tiny.toml", "--manifest", "data/manifest.csv"];
    ok(d, &[&["predict"], &ck[..], &["--checkpoint", "run/model.wnt", "--out", "pred"]].concat());
    ok(d, &[&["eval"], &ck[..], &["--checkpoint", "run/model.wnt", "--out", "a", "--no-overlays"]].concat());
    ok(d, &[&["eval"], &ck[..], &["--predictions", "pred/manifest.csv", "--out", "b", "--no-overlays"]].concat());
    let (a, b) = (report(&d.join("a/report.json")), report(&d.join("b/report.json")));
    for task in ["od", "ex"] {
        assert_eq!(a["aggregate"][task]["pixel"], b["aggregate"][task]["pixel"]);
        assert_eq!(a["aggregate"][task]["lesion"], b["aggregate"][task]["lesion"]);
    }
}

#[test]
fn sweep_omega_emits_one_row_per_value() {
    let dir = setup();
    let d = dir.path();
    let stdout = ok(d, &[
        "sweep-omega", "--config", "tiny.toml", "--manifest", "data/manifest.csv", "--grid", "0,0.5,1", "--folds", "0",
        "--out", "sw",
    ]);
    let csv = std::fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "omega,od_f1,ex_f1,mean_f1");
    assert_eq!(lines.len(), 4);
    assert_eq!(stdout.lines().count(), 3);
    ok(d, &["report", "--sweep", "sw/sweep.csv", "--out", "rep"]);
    assert!(std::fs::read_to_string(d.join("rep/summary.md")).unwrap().contains("| 0.5 |"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = setup();
    let d = dir.path();
    let train = ["train", "--config", "tiny.toml", "--manifest", "data/manifest.csv", "--fold", "1", "--out", "run"];
    let eval = [
        "eval", "--config", "tiny.toml", "--manifest", "data/manifest.csv", "--checkpoint", "run/best.wnt", "--fold", "1",
        "--out", "ev",
    ];
    ok(d, &train);
    ok(d, &eval);
    let first = snapshot(d);
    ok(d, &["synth", "--out", "data", "--count", "8", "--size", "32", "--seed", "3"]);
    ok(d, &train);
    ok(d, &eval);
    let second = snapshot(d);
    assert!(first.contains_key(Path::new("run/best.wnt")));
    assert!(first.contains_key(Path::new("ev/report.json")));
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (k, v) in &first {
        assert!(v == &second[k], "{} differs", k.display());
    }
}

#[test]
fn usage_errors_exit_two_with_json() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "epochs = 0\n").unwrap();
    std::fs::write(d.join("unknown.toml"), "epoch = 3\n").unwrap();
    let cases: [&[&str]; 5] = [
        &["train", "--bogus"],
        &["frobnicate"],
        &["train", "--config", "bad.toml", "--manifest", "data/manifest.csv", "--out", "x"],
        &["train", "--config", "unknown.toml", "--manifest", "data/manifest.csv", "--out", "x"],
        &["sweep-omega", "--manifest", "data/manifest.csv", "--grid", "0.5,0", "--out", "x"],
    ];
    for args in cases {
        let out = wnet(d, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err: Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(err["error"]["kind"], "usage", "{args:?}");
        assert!(err["error"]["message"].is_string());
    }
}

#[test]
fn runtime_errors_exit_one_with_json() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("dup.csv"), "id,image,od_mask,ex_mask,tags\na,data/images/syn0000.png,data/od/syn0000.png,,\na,data/images/syn0001.png,data/od/syn0001.png,,\n").unwrap();
    for args in [
        &["eval", "--manifest", "missing.csv", "--predictions", "missing.csv", "--out", "x"][..],
        &["eval", "--manifest", "dup.csv", "--predictions", "dup.csv", "--out", "x"][..],
    ] {
        let out = wnet(d, args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err: Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(err["error"]["kind"], "runtime");
    }
    let out = wnet(d, &["eval", "--manifest", "dup.csv", "--predictions", "dup.csv", "--out", "x"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("`a`"));
}
