use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn config(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn gesens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gesens"))
        .args(args)
        .env_remove("GESENS_SEED")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn ge_solve_box() {
    let out = gesens(&["ge", "solve", "--config", &config("box1d.json"), "--u", "[2]"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert!((v["y"][0].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(v["status"], "converged");
}

#[test]
fn ge_sens_matches_oracle() {
    let out = gesens(&["ge", "sens", "--config", &config("box1d.json"), "--u", "[2]", "--h", "[1]"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert!((v["delta"][0].as_f64().unwrap() - 1.0).abs() < 1e-10);
    assert!(v["gap"].as_f64().unwrap() < 1e-8);
}

#[test]
fn qvi_sens_both() {
    let out = gesens(&[
        "qvi", "sens", "--config", &config("qvi1d.json"), "--u", "[4]", "--h", "[1]", "--method", "both",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert!(v["delta_transformation"][0].as_f64().unwrap().abs() < 1e-10);
    assert!(v["delta_iteration"][0].as_f64().unwrap().abs() < 1e-10);
    assert!(v["gap"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn qvi_diag_reports_c_rho() {
    let out = gesens(&["qvi", "diag", "--config", &config("qvi1d.json"), "--u", "[4]"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    let table = v["c_rho_table"].as_array().unwrap();
    assert_eq!(table.len(), 4);
    for row in table {
        assert!((row["ratio"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn output_is_deterministic_and_atomic() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let args = |d: &Path| {
        vec![
            "qvi".to_string(),
            "solve".into(),
            "--config".into(),
            config("qvi1d.json"),
            "--u".into(),
            "[1.3]".into(),
            "--method".into(),
            "both".into(),
            "--out".into(),
            d.to_string_lossy().into_owned(),
        ]
    };
    let run = |d: &Path| {
        let a = args(d);
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        gesens(&a)
    };
    let first = run(&out_dir);
    assert_eq!(first.status.code(), Some(0));
    let written = std::fs::read(out_dir.join("qvi_solve.json")).unwrap();
    assert_eq!(written, first.stdout);
    let second = run(&dir.path().join("again"));
    assert_eq!(first.stdout, second.stdout);
    let leftovers: Vec<_> = std::fs::read_dir(&out_dir).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn vector_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let u = dir.path().join("u.json");
    std::fs::write(&u, "[0.75]").unwrap();
    let arg = format!("@{}", u.display());
    let out = gesens(&["ge", "solve", "--config", &config("box1d.json"), "--u", &arg]);
    assert_eq!(out.status.code(), Some(0));
    assert!((stdout_json(&out)["y"][0].as_f64().unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn malformed_config_exits_3_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let text = std::fs::read_to_string(configs().join("box1d.json"))
        .unwrap()
        .replace(r#""solver""#, r#""constants": {"mu": -1}, "solver""#);
    std::fs::write(&cfg, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = gesens(&[
        "ge",
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--u",
        "[1]",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(out.stdout.is_empty());
    assert!(!out_dir.exists());
}

#[test]
fn wrong_version_and_bad_rho_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("v0.json");
    let text = std::fs::read_to_string(configs().join("box1d.json")).unwrap();
    std::fs::write(&cfg, text.replace("gesens/1", "gesens/0")).unwrap();
    let out = gesens(&["ge", "solve", "--config", cfg.to_str().unwrap(), "--u", "[1]"]);
    assert_eq!(out.status.code(), Some(3));
    let out = gesens(&["ge", "solve", "--config", &config("box1d.json"), "--u", "[1]", "--rho", "5"]);
    assert_eq!(out.status.code(), Some(3));
    let out = gesens(&["ge", "solve", "--config", &config("box1d.json"), "--u", "[1, 2]"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(gesens(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(gesens(&["ge", "solve", "--bogus"]).status.code(), Some(64));
    assert_eq!(gesens(&["--help"]).status.code(), Some(0));
    assert_eq!(gesens(&["--version"]).status.code(), Some(0));
}

#[test]
fn nonconvergence_exits_2() {
    let out = gesens(&[
        "ge", "solve", "--config", &config("shrink2d.json"), "--u", "[0.1, 0.2]", "--tol", "1e-30",
    ]);
    // a tolerance below roundoff still terminates, flagged as roundoff limited
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["roundoff_limited"], true);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("slow.json");
    let text = std::fs::read_to_string(configs().join("shrink2d.json"))
        .unwrap()
        .replace(r#""rho": "auto""#, r#""rho": "auto", "max_iters": 2"#);
    std::fs::write(&cfg, text).unwrap();
    let out = gesens(&["ge", "solve", "--config", cfg.to_str().unwrap(), "--u", "[0.1, 0.2]"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["status"], "non_converged");
}

#[test]
fn verify_suites() {
    for suite in ["cocoercive", "combined", "constants", "prox", "firm", "symmetry"] {
        let out = gesens(&["verify", "--config", &config("shrink2d.json"), "--suite", suite, "--trials", "200"]);
        assert_eq!(out.status.code(), Some(0), "suite {suite}");
        assert_eq!(stdout_json(&out)["pass"], true);
    }
    // declared Lipschitz constant below the true one
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("low_lip.json");
    let text = std::fs::read_to_string(configs().join("shrink2d.json"))
        .unwrap()
        .replace(r#""solver""#, r#""constants": {"lip": 2.0}, "solver""#);
    std::fs::write(&cfg, text).unwrap();
    let out = gesens(&["verify", "--config", cfg.to_str().unwrap(), "--suite", "cocoercive"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stdout_json(&out)["pass"], false);
}

#[test]
fn apps_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    std::fs::write(&h, ["1"; 8].join("\n")).unwrap();
    let out_dir = dir.path().join("sparse");
    let out = gesens(&[
        "app",
        "sparse",
        "--n",
        "8",
        "--seed",
        "3",
        "--h-file",
        h.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(out_dir.join("sensitivity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    for line in csv.lines().skip(1) {
        let gap: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(gap < 1e-6, "{line}");
    }
    assert!(out_dir.join("solution.csv").exists());
}
