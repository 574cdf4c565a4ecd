use std::fs;
use std::process::{Command, Output};

use ndarray::Array2;
use seqcompress::seqcore::{load_frames, save_frames, FrameSequence};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqcompress")).args(args).output().unwrap()
}

fn path(dir: &tempfile::TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

#[test]
fn subsample_halves_length_and_doubles_period() {
    let dir = tempfile::tempdir().unwrap();
    let x = FrameSequence::new(Array2::from_shape_fn((7, 2), |(t, c)| (t * 2 + c) as f64), 10.0).unwrap();
    save_frames(&x, dir.path().join("x.sqp")).unwrap();
    let out = run(&["subsample", "--in", &path(&dir, "x.sqp"), "--method", "avg", "--stride", "2", "--out", &path(&dir, "y.sqp")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let y = load_frames(dir.path().join("y.sqp")).unwrap();
    assert_eq!(y.len(), 4);
    assert_eq!(y.frame_period_ms(), 20.0);
    assert_eq!(y.data()[[0, 0]], 1.0);
    assert_eq!(y.data()[[3, 1]], 13.0);
}

#[test]
fn macs_writes_one_row_per_stride() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.json"), r#"[{"kind": "linear", "d_in": 4, "d_out": 8}]"#).unwrap();
    let out = run(&["macs", "--model", &path(&dir, "m.json"), "--len", "10", "--strides", "1,2", "--out", &path(&dir, "m.csv")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,20.0,50.0,320,"), "{}", lines[1]);
    assert!(lines[2].starts_with("2,40.0,25.0,160,"), "{}", lines[2]);
}

#[test]
fn framerate_pools_over_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("u.csv"), "count,seconds\n3,1.0\n9,2.0\n").unwrap();
    let out = run(&["framerate", "--in", &path(&dir, "u.csv"), "--out", &path(&dir, "r.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(v["rate_hz"], 4.0);
}

#[test]
fn malformed_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let out = run(&["train", "--config", &path(&dir, "bad.json")]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(dir.path().join("unknown.json"), r#"{"synth": {}, "surprise": 1}"#).unwrap();
    let out = run(&["train", "--config", &path(&dir, "unknown.json")]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["subsample", "--in", &path(&dir, "nope.sqp"), "--method", "cat", "--stride", "2", "--out", &path(&dir, "o.sqp")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("seqcompress: "));
}

#[test]
fn divergent_training_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("t.json"),
        r#"{"synth": {"n_utterances": 4, "min_len": 20, "max_len": 24, "dim": 4},
            "student": {"hidden_dim": 4, "heads": [2]},
            "train": {"steps": 50, "batch_size": 2, "optimizer": {"lr": 1e300},
                      "distance": {"kind": "euclidean_sq", "cosine_weight": 0.0}},
            "log": "loss.jsonl", "checkpoint": "m.ckp"}"#,
    )
    .unwrap();
    let out = run(&["train", "--config", &path(&dir, "t.json")]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
