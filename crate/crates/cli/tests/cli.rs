use std::path::Path;
use std::process::{Command, Output};

fn bevtrack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevtrack"))
        .args(args)
        .env("BEVTRACK_OUTPUT_DIR", dir)
        .output()
        .expect("binary runs")
}

const FAST: [&str; 8] = ["--frames", "12", "--steps", "5", "--training-scenarios", "1", "--k", "3"];

fn fast(extra: &[&str]) -> Vec<String> {
    FAST.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = bevtrack(dir, &refs);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().expect("error line")).expect("JSON error line")
}

#[test]
fn simulate_train_track_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run(dir, &fast(&["--name", "pipe", "simulate", "--seed", "4"]));
    let scen = dir.join("pipe/scenario_seed4");
    assert!(scen.join("gt.csv").exists() && scen.join("detections.features.bin").exists());
    run(dir, &fast(&["--name", "pipe", "train"]));
    let model = dir.join("pipe/model.toml");
    assert!(model.exists());
    let det = scen.join("detections.csv");
    let tracks = dir.join("pipe/tracks.csv");
    run(dir, &fast(&["--name", "pipe", "track", "--detections", det.to_str().unwrap(), "--model", model.to_str().unwrap()]));
    assert!(tracks.exists());
    let out = run(dir, &fast(&[
        "--name", "pipe", "eval",
        "--gt", scen.join("gt.csv").to_str().unwrap(),
        "--tracks", tracks.to_str().unwrap(),
        "--detections", det.to_str().unwrap(),
    ]));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("run_id,seed,config_hash,idf1,mota"));
    assert!(lines.next().unwrap().starts_with("pipe,eval,"));
}

#[test]
fn track_without_model_reports_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run(dir, &fast(&["simulate"]));
    let det = dir.join("baseline/scenario_seed0/detections.csv");
    let out = bevtrack(dir, &["track", "--detections", det.to_str().unwrap()]);
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"], "invalid_config");
    // Kalman motion with TMC only needs no branches.
    run(dir, &fast(&["--cost-mode", "tmc_only", "--motion-mode", "kalman", "track", "--detections", det.to_str().unwrap()]));
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let args = fast(&["--seeds", "0,1", "--name", "det", "run"]);
    run(tmp.path(), &args);
    let first = std::fs::read(tmp.path().join("det/per_seed.csv")).unwrap();
    run(tmp.path(), &args);
    assert_eq!(std::fs::read(tmp.path().join("det/per_seed.csv")).unwrap(), first);
    assert!(tmp.path().join("det/summary.csv").exists());
}

#[test]
fn sweep_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    run(tmp.path(), &fast(&["--name", "sw", "sweep", "--axis", "alpha", "--values", "0.5,0.98"]));
    let table = std::fs::read_to_string(tmp.path().join("sw_alpha.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 3);
    assert!(tmp.path().join("sw_alpha.svg").exists());
}

#[test]
fn invalid_input_is_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bevtrack(tmp.path(), &["--alpha", "2", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "invalid_config");

    let out = bevtrack(tmp.path(), &["sweep", "--axis", "width", "--values", "1"]);
    assert_eq!(error_json(&out)["error"], "invalid_config");

    let out = bevtrack(tmp.path(), &["eval", "--gt", "missing.csv", "--tracks", "missing.csv"]);
    assert!(!out.status.success());
    assert!(error_json(&out)["message"].is_string());

    let out = bevtrack(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");
}

#[test]
fn config_file_and_env_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("spec.toml");
    std::fs::write(&cfg, "name = \"fromfile\"\nseeds = [3, 4]\n[tracker]\nk = 5\n").unwrap();
    let out = run(tmp.path(), &["--config".into(), cfg.to_str().unwrap().into(), "config".into()]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("name = \"fromfile\""));
    assert!(text.contains("k = 5"));
    assert!(text.contains(&format!("output_dir = \"{}\"", tmp.path().display())));

    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    let out = bevtrack(tmp.path(), &["--config", cfg.to_str().unwrap(), "config"]);
    assert_eq!(error_json(&out)["error"], "parse");
}
