use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ries(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ries")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn without_wall_time(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("wall_time_s");
    v
}

fn qubit_model() -> Value {
    let config: Value = serde_json::from_str(&fs::read_to_string(configs_dir().join("oracle_qubit.json")).unwrap()).unwrap();
    config["model"].clone()
}

fn two_atom() -> Value {
    let config: Value =
        serde_json::from_str(&fs::read_to_string(configs_dir().join("ergodic_two_atom.json")).unwrap()).unwrap();
    config["ensemble"].clone()
}

#[test]
fn classify_diagonal_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();
    let cfg = configs_dir().join("classify_diag.json");
    let res = ries(&["run", cfg.to_str().unwrap(), "--out", out_s]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let s = summary(&out);
    assert_eq!(s["payload"]["in_class_e"], Value::Bool(true));
    assert!(out.join("series.csv").exists());
}

#[test]
fn oracle_check_on_qubit_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("oracle_qubit.json");
    let out = tmp.path().join("o");
    let res = ries(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("window_oracle: pass"));
    assert_eq!(summary(&out)["passed"], Value::Bool(true));
}

#[test]
fn small_ergodic_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "experiment": "ergodic",
        "ensemble": two_atom(),
        "seeds": [0, 1, 2, 3],
        "n_total": 4000,
        "checkpoint_every": 1000,
    });
    let cfg = write(tmp.path(), "e.json", &config.to_string());
    let out = tmp.path().join("o");
    let res = ries(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
    let csv = fs::read_to_string(out.join("series.csv")).unwrap();
    assert!(csv.lines().count() > 4);
}

#[test]
fn validate_fills_defaults_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("classify_diag.json");
    let res = ries(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0));
    let resolved: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(resolved["tolerances"]["tol_one"], serde_json::json!(1e-8));
    assert_eq!(resolved["seeds"], serde_json::json!([0]));

    let again = write(tmp.path(), "resolved.json", &String::from_utf8_lossy(&res.stdout));
    let res2 = ries(&["validate", again.to_str().unwrap()]);
    assert_eq!(res2.status.code(), Some(0));
    assert_eq!(res.stdout, res2.stdout);
}

#[test]
fn every_example_config_validates() {
    let mut count = 0;
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let res = ries(&["validate", path.to_str().unwrap()]);
        assert_eq!(res.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&res.stderr));
        count += 1;
    }
    assert!(count >= 9);
}

#[test]
fn schema_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ens = two_atom();
    ens["atoms"][0]["p"] = serde_json::json!(0.3);
    let bad_p = serde_json::json!({"experiment": "decay", "ensemble": ens});
    let cfg = write(tmp.path(), "p.json", &bad_p.to_string());
    assert_eq!(ries(&["run", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(ries(&["validate", cfg.to_str().unwrap()]).status.code(), Some(2));

    let unknown = r#"{"experiment": "classify", "matrix": [[1,0]], "verbose": true}"#;
    let cfg = write(tmp.path(), "u.json", unknown);
    let res = ries(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("verbose"));

    let missing = tmp.path().join("absent.json");
    assert_eq!(ries(&["validate", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn summaries_do_not_depend_on_jobs_or_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "experiment": "decay",
        "ensemble": two_atom(),
        "seeds": [4, 5, 6, 7, 8, 9],
        "n_total": 300,
    });
    let cfg = write(tmp.path(), "d.json", &config.to_string());
    let a = tmp.path().join("a");
    let b = tmp.path().join("nested/b");
    assert_eq!(ries(&["run", cfg.to_str().unwrap(), "--out", a.to_str().unwrap(), "--jobs", "1"]).status.code(), Some(0));
    assert_eq!(ries(&["run", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--jobs", "4"]).status.code(), Some(0));
    assert_eq!(without_wall_time(summary(&a)), without_wall_time(summary(&b)));
    assert_eq!(fs::read(a.join("series.csv")).unwrap(), fs::read(b.join("series.csv")).unwrap());

    let c = tmp.path().join("c");
    assert_eq!(
        ries(&["run", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "--seed-offset", "1"]).status.code(),
        Some(0)
    );
    assert_ne!(summary(&a)["run_id"], summary(&c)["run_id"]);
}

#[test]
fn oversized_chain_hits_capacity_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let config = serde_json::json!({"experiment": "oracle-check", "model": qubit_model(), "steps": 12});
    let cfg = write(tmp.path(), "c.json", &config.to_string());
    let res = ries(&["run", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn failed_check_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "experiment": "oracle-check",
        "model": qubit_model(),
        "steps": 4,
        "tolerances": {"oracle": 0.0},
    });
    let cfg = write(tmp.path(), "f.json", &config.to_string());
    let out = tmp.path().join("o");
    let res = ries(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(summary(&out)["passed"], Value::Bool(false));
}
