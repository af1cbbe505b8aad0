use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctseq")).args(args).output().expect("spawn ctseq")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_run(out: &Path) -> Output {
    ctseq(&[
        "run",
        "sparse",
        "--out",
        out.to_str().unwrap(),
        "--side",
        "16",
        "--angles",
        "12",
        "--warmup",
        "2",
        "--predictor",
        "fbp",
        "--total-intensity",
        "1e5",
    ])
}

const SWEEP: &str = r#"schema_version = 1
[base]
schema_version = 1
[base.phantom]
family = "ellipses"
side = 16
[base.acquisition]
mode = "sparse"
angles = 10
warmup = 2
total_intensity = 1e5
[grid]
families = ["ellipses", "manhattan"]
phantoms = 1
intensities = [1e5]
seeds = [0]
predictors = [{ kind = "fbp" }]
write_runs = true
"#;

#[test]
fn run_then_replay_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let o = small_run(&dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "measurements.jsonl", "trajectory.csv", "metrics.csv", "truth.f32", "truth.json"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let o = ctseq(&["replay", "--run", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("10 steps"));
}

#[test]
fn identical_invocations_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&small_run(&a)), 0);
    assert_eq!(code(&small_run(&b)), 0);
    for f in ["config.toml", "measurements.jsonl", "trajectory.csv", "metrics.csv", "truth.f32"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn tampered_trajectory_fails_replay_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    assert_eq!(code(&small_run(&dir)), 0);
    let path = dir.join("trajectory.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let mut fields: Vec<String> = lines[3].split(',').map(str::to_owned).collect();
    let beta: f64 = fields[3].parse().unwrap();
    fields[3] = (beta + 1e-3).to_string();
    lines[3] = fields.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = ctseq(&["replay", "--run", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_values_exit_with_code_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = ctseq(&["run", "sparse", "--out", out.to_str().unwrap(), "--delta", "1.5"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta"));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "schema_version = 1\nsurprise = 3\n").unwrap();
    let o = ctseq(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("surprise"));

    let o = ctseq(&["run", "sparse", "--out", out.to_str().unwrap(), "--no-such-flag"]);
    assert_eq!(code(&o), 1);

    fs::write(&cfg, "schema_version = 99\n").unwrap();
    let o = ctseq(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn mode_mismatch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    assert_eq!(code(&small_run(&dir)), 0);
    let o = ctseq(&[
        "run",
        "dense",
        "--config",
        dir.join("config.toml").to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn simulate_writes_log_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sim");
    let o = ctseq(&["simulate", "--out", dir.to_str().unwrap(), "--side", "16", "--angles", "6", "--warmup", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.join("measurements.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert_eq!(fs::metadata(dir.join("truth.f32")).unwrap().len(), 16 * 16 * 4);
}

#[test]
fn sweep_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sweep.toml");
    fs::write(&cfg, SWEEP).unwrap();
    let out = tmp.path().join("out");
    let o = ctseq(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("2 runs, 0 failures"));
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);

    let figs = tmp.path().join("figs");
    let o = ctseq(&["export", "--input", out.to_str().unwrap(), "--output", figs.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(figs.join("fig3_tightness.csv").exists());
    assert!(fs::read_dir(figs.join("maps")).unwrap().count() > 0);
}

#[test]
fn sweep_with_failing_runs_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sweep.toml");
    fs::write(&cfg, SWEEP).unwrap();
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).unwrap();
    // a plain file where the per-run directories should go
    fs::write(out.join("runs"), "").unwrap();
    let o = ctseq(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let failures = fs::read_to_string(out.join("failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 3);
}
