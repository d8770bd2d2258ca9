use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rwre-lab"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run_config(cfg: &Value, dir: &Path) -> Output {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    bin().arg("run").arg(&path).arg("--out").arg(dir.join("out")).output().unwrap()
}

fn periodic_cross_check(tol: f64) -> Value {
    json!({
        "kind": "cross-check",
        "seed": 4,
        "environment": {
            "dimension": 1,
            "structure": { "kind": "periodic", "profiles": [[0.9, 0.1], [0.2, 0.8]] },
            "seed": 0
        },
        "params": { "xi_grid": [0.75, 0.8, 0.85, 0.9], "tol": tol }
    })
}

fn strip_timing(mut report: Value) -> Value {
    report.as_object_mut().unwrap().remove("timing");
    report
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn cross_check_writes_both_routes_and_they_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config(&periodic_cross_check(1e-13), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rd = csv::Reader::from_path(dir.path().join("out/curves.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["xi", "I_zeta", "I_perron", "abs_diff"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let v: Vec<f64> = r.iter().map(|s| s.parse().unwrap()).collect();
        assert!(v[3] <= 1e-5, "routes differ by {} at xi = {}", v[3], v[0]);
        assert!((v[3] - (v[1] - v[2]).abs()).abs() < 1e-11);
    }
}

#[test]
fn reruns_are_identical_apart_from_timing() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("conditioning.json");
    for (d, jobs) in [(&a, "1"), (&b, "3")] {
        let st = bin().args(["--jobs", jobs, "run"]).arg(&cfg).arg("--out").arg(d.path()).status().unwrap();
        assert_eq!(st.code(), Some(0));
    }
    let ra = strip_timing(read_json(&a.path().join("report.json")));
    let rb = strip_timing(read_json(&b.path().join("report.json")));
    assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
    assert_eq!(
        std::fs::read(a.path().join("curves.csv")).unwrap(),
        std::fs::read(b.path().join("curves.csv")).unwrap()
    );
}

#[test]
fn embedded_config_reproduces_the_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config(&periodic_cross_check(1e-13), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let first = read_json(&dir.path().join("out/report.json"));
    let again = tempfile::tempdir().unwrap();
    let out = run_config(&first["config"], again.path());
    assert_eq!(out.status.code(), Some(0));
    let second = read_json(&again.path().join("out/report.json"));
    assert_eq!(first["results"], second["results"]);
    assert_eq!(first["config"], second["config"]);
}

#[test]
fn negative_tolerance_is_a_field_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config(&periodic_cross_check(-1.0), dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("params.tol"), "{err}");
    assert!(err.contains("must be positive"), "{err}");
    assert!(!dir.path().join("out/report.json").exists());
}

#[test]
fn parse_errors_carry_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"kind\": \"cross-check\",\n  \"seed\": 1,\n  \"colour\": 3\n}\n").unwrap();
    let out = bin().arg("run").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
    assert!(err.contains("colour"), "{err}");
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = periodic_cross_check(1e-13);
    cfg.as_object_mut().unwrap().remove("seed");
    let out = run_config(&cfg, dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn censoring_flag_gives_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    // a one-step lookahead certifies many points that the walk later revisits
    let cfg = json!({
        "kind": "averaged-rate",
        "seed": 9,
        "environment": {
            "dimension": 1,
            "structure": { "kind": "static" },
            "law": { "kind": "finite", "profiles": [[0.7, 0.3], [0.6, 0.4]], "weights": [0.5, 0.5] },
            "seed": 0
        },
        "params": {
            "harvest": { "direction": [1.0], "slabs": 2000, "horizon": 1, "path_len": 2000, "bootstrap_resamples": 20 },
            "xi_grid": [0.5]
        }
    });
    let out = run_config(&cfg, dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("out/report.json"));
    let flags = report["flags"].as_array().unwrap();
    assert!(flags.iter().any(|f| f.as_str().unwrap().starts_with("censoring")));
}

#[test]
fn seed_override_replaces_the_master_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("conditioning.json");
    let st = bin().arg("run").arg(&cfg).args(["--seed-override", "99", "--out"]).arg(dir.path()).status().unwrap();
    assert_eq!(st.code(), Some(0));
    assert_eq!(read_json(&dir.path().join("report.json"))["config"]["seed"], 99);
}

#[test]
fn list_prints_the_seven_kinds() {
    let out = bin().arg("list").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.contains("quenched-rate-1d: r(ξ)−ξλ(r(ξ))"));
    assert!(text.contains("spacetime-gn: meeting-time recursion check"));
    for kind in ["finite-oracle", "averaged-rate", "spacetime-doob", "conditioning", "cross-check"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{kind}: "))), "{kind}");
    }
}

#[test]
fn every_shipped_config_runs() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "spacetime-gn.json" {
            continue; // covered by the shortcut test at a smaller size
        }
        let dir = tempfile::tempdir().unwrap();
        let out = bin().arg("run").arg(&path).arg("--out").arg(dir.path()).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
        let report = read_json(&dir.path().join("report.json"));
        assert!(report["build"]["git"].is_string());
        assert!(report["timing"]["wall_seconds"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn spacetime_shortcuts_run() {
    let dir = tempfile::tempdir().unwrap();
    let gn = dir.path().join("gn");
    let st = bin().args(["st-gn", "--dim", "1", "--depth", "8", "--theta", "0.2", "--out"]).arg(&gn).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let report = read_json(&gn.join("report.json"));
    assert_eq!(report["results"]["meeting_kernel"]["recurrent"], true);

    let doob = dir.path().join("doob");
    let st = bin().args(["st-doob", "--dim", "2", "--depth", "8", "--theta", "0.1,0", "--out"]).arg(&doob).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let probs = read_json(&doob.join("report.json"))["results"]["kernel"]["probs"].clone();
    let sum: f64 = probs.as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-14);

    let cond = dir.path().join("cond");
    let st = bin()
        .args(["st-condition", "--dim", "1", "--xi", "0.2", "--depth", "10,20", "--out"])
        .arg(&cond)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let mut rd = csv::Reader::from_path(cond.join("curves.csv")).unwrap();
    assert_eq!(rd.records().count(), 2);
}

#[test]
fn slab_ensembles_round_trip_through_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("averaged-rate.json");
    let first = dir.path().join("a");
    let st = bin()
        .arg("slabs")
        .arg(&cfg)
        .args(["--count", "5000", "--theta-grid", "0.2", "--bootstrap", "20", "--out"])
        .arg(&first)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let lines = std::fs::read_to_string(first.join("slabs.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5000);
    let second = dir.path().join("b");
    let st = bin()
        .arg("slabs")
        .arg(&cfg)
        .arg("--ensemble")
        .arg(first.join("slabs.jsonl"))
        .args(["--theta-grid", "0.2", "--bootstrap", "20", "--out"])
        .arg(&second)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let a = read_json(&first.join("slabs.json"));
    let b = read_json(&second.join("slabs.json"));
    assert_eq!(a["lambda_a"], b["lambda_a"]);
}
