use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kit(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_offload-kit")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "offload-kit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn sim(dir: &Path, offload: &str) {
    kit(&["sim", "--preset", "fd50", "--offload", offload, "--seed", "1", "--out", dir.to_str().unwrap()]);
}

#[test]
fn sim_writes_the_three_output_files() {
    let tmp = tempfile::tempdir().unwrap();
    sim(tmp.path(), "on");
    for f in ["trace.jsonl", "metrics.csv", "summary.txt"] {
        let text = fs::read_to_string(tmp.path().join(f)).unwrap();
        assert!(!text.is_empty(), "{f} is empty");
    }
}

#[test]
fn compare_records_both_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let off = tmp.path().join("off");
    let on = tmp.path().join("on");
    sim(&off, "off");
    sim(&on, "on");
    let out = kit(&["compare", off.to_str().unwrap(), on.to_str().unwrap(), "--record"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("avg_power_reduction_pct"));
    assert!(stdout.contains("makespan_reduction_pct"));
    let summary = fs::read_to_string(on.join("summary.txt")).unwrap();
    assert!(summary.contains("avg_power_reduction_pct"));
    assert!(summary.contains("makespan_reduction_pct"));
}

#[test]
fn shown_config_runs_like_the_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let json = kit(&["show", "--preset", "fd50"]).stdout;
    let cfg = tmp.path().join("fd50.json");
    fs::write(&cfg, json).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    sim(&a, "on");
    kit(&["sim", "--config", cfg.to_str().unwrap(), "--seed", "1", "--out", b.to_str().unwrap()]);
    assert_eq!(
        fs::read(a.join("trace.jsonl")).unwrap(),
        fs::read(b.join("trace.jsonl")).unwrap()
    );
}

#[test]
fn unknown_preset_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_offload-kit"))
        .args(["sim", "--preset", "nope", "--out", "/tmp/never"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn presets_are_listed() {
    let stdout = String::from_utf8(kit(&["presets"]).stdout).unwrap();
    assert!(stdout.lines().any(|l| l == "fd50"));
}
