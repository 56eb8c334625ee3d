use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tgcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgcl")).args(args).output().expect("spawn tgcl")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// A config smaller than the shipped smoke config, for quick runs.
fn write_tiny(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(
        &path,
        serde_json::json!({
            "include": configs().join("smoke.json"),
            "data": { "synthetic": { "num_periods": 2, "classes_per_period": 2, "nodes_per_class_per_period": 15 } },
            "strategies": ["joint", "er", "ltf"],
            "train": { "epochs": 2 }
        })
        .to_string(),
    )
    .unwrap();
    path
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out = dir.path().join("out");
    let o = tgcl(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("ltf"), "{stdout}");
    for f in ["results.csv", "timing.csv", "summary.json", "summary.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let r = tgcl(&["report", out.to_str().unwrap()]);
    assert!(r.status.success());
    assert_eq!(text(&r.stdout), fs::read_to_string(out.join("summary.txt")).unwrap());
}

#[test]
fn resume_keeps_results_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out = dir.path().join("out");
    let args = ["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert!(tgcl(&args).status.success());
    let first = fs::read(out.join("results.csv")).unwrap();
    let o = tgcl(&[&args[..], &["--resume", "--jobs", "2"]].concat());
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), first);
}

#[test]
fn gen_writes_a_loadable_graph() {
    let dir = tempfile::tempdir().unwrap();
    let synth = dir.path().join("synth.json");
    fs::write(
        &synth,
        r#"{ "num_periods": 2, "classes_per_period": 2, "nodes_per_class_per_period": 30, "feature_dim": 3 }"#,
    )
    .unwrap();
    let out = dir.path().join("graph");
    let o = tgcl(&["gen", synth.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    for f in ["nodes.csv", "events.csv", "periods.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    // the generated files drive a run through a files data source
    let cfg = dir.path().join("files.json");
    fs::write(
        &cfg,
        serde_json::json!({
            "data": { "files": { "nodes": "graph/nodes.csv", "events": "graph/events.csv" } },
            "strategies": ["finetune"],
            "train": { "epochs": 2, "batch_size": 16, "hidden_dim": 8 },
            "seeds": [0]
        })
        .to_string(),
    )
    .unwrap();
    let o = tgcl(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("out").to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
}

#[test]
fn select_prints_a_buffer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let o = tgcl(&["select", cfg.to_str().unwrap(), "--period", "2"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let buffer: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(buffer["period"], 2);
    assert_eq!(buffer["sub"].as_array().unwrap().len(), 6);
    assert_eq!(buffer["sim"].as_array().unwrap().len(), 12);

    let o = tgcl(&["select", cfg.to_str().unwrap(), "--period", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_names_the_field_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{ "data": { "synthetic": {} }, "strategies": ["ltf"], "sel": { "m": "many" } }"#).unwrap();
    let o = tgcl(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("sel.m"), "{}", text(&o.stderr));
}

#[test]
fn unknown_preset_is_rejected() {
    let o = tgcl(&["run", configs().join("smoke.json").to_str().unwrap(), "--preset", "everything"]);
    assert!(!o.status.success());
    assert!(text(&o.stderr).contains("everything"));
}

#[test]
fn missing_report_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = tgcl(&["report", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
