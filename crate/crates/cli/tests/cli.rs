use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn otafl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otafl"))
        .args(args)
        .env_remove("OTAFL_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_CASE2: &str = "case = \"II\"\nrounds = 400\nseeds = 3\n";

#[test]
fn optimize_writes_artifacts_with_positive_z() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let out = tmp.path().join("o");
    let o = otafl(&["optimize", path(&cfg), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let art: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("artifacts.json")).unwrap()).unwrap();
    assert!(art["plan"]["provenance"]["Z"].as_f64().unwrap() > 0.0);
    assert!(art["plan"]["provenance"]["S"].as_f64().unwrap() > 0.0);
    assert!(stdout(&o).contains("Z = "));
}

#[test]
fn optimize_oracle_flag_prints_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "devices = 3\n");
    let o = otafl(&["optimize", path(&cfg), "--oracle", "--out", path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("oracle Z"));
    let big = write_config(tmp.path(), "big.toml", "");
    let o = otafl(&["oracle", path(&big)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_config_exits_1_with_position() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "devices = 4\nrouns = 3\n");
    let o = otafl(&["optimize", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("rouns") && err.contains("line 2"), "{err}");
    let cfg = write_config(tmp.path(), "d.toml", "theta_th = 2.0\n");
    assert_eq!(otafl(&["train", path(&cfg)]).status.code(), Some(1));
}

#[test]
fn unknown_strategy_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "rounds = 3\nseeds = 1\n");
    let o = otafl(&[
        "train",
        path(&cfg),
        "--strategy",
        "normalized,signsgd",
        "--out",
        path(&tmp.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("signsgd"));
}

#[test]
fn infeasible_case2_target_exits_1_with_hint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "case = \"II\"\ntarget_eps = 100.0\n");
    let o = otafl(&["optimize", path(&cfg)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_three_strategies_then_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_CASE2);
    let out = tmp.path().join("o");
    let o = otafl(&[
        "train",
        path(&cfg),
        "--strategy",
        "normalized,raw_conservative,standardized",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let means = fs::read_to_string(out.join("means.csv")).unwrap();
    let mut lines = means.lines();
    assert_eq!(
        lines.next().unwrap(),
        "strategy,t,loss,loss_se,grad_norm,min_grad_norm,gap,gap_se"
    );
    assert_eq!(lines.count(), 3 * 400);
    for s in ["normalized", "raw_conservative", "standardized"] {
        let csv = fs::read_to_string(out.join("traces").join(format!("{s}_seed2.csv"))).unwrap();
        assert!(csv.starts_with("t,loss,grad_norm,min_grad_norm,gap,theta_max,eta\n"));
    }

    // Case II at defaults: the mean gap drops at least tenfold.
    let gaps: Vec<f64> = means
        .lines()
        .filter(|l| l.starts_with("normalized,"))
        .map(|l| l.split(',').nth(6).unwrap().parse().unwrap())
        .collect();
    assert!(
        gaps[gaps.len() - 1] * 10.0 <= gaps[0],
        "{} vs {}",
        gaps[gaps.len() - 1],
        gaps[0]
    );

    let effective = out.join("config.toml");
    let o = otafl(&["bounds", path(&effective), "--traces", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let report = fs::read_to_string(out.join("bounds.csv")).unwrap();
    assert!(report.starts_with("T,measured,bound,margin\n"));
    assert_eq!(report.lines().count(), 401);
}

#[test]
fn tampered_trace_is_a_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_CASE2);
    let out = tmp.path().join("o");
    assert_eq!(
        otafl(&["train", path(&cfg), "--out", path(&out)]).status.code(),
        Some(0)
    );
    assert_eq!(
        otafl(&["bounds", path(&cfg), "--traces", path(&out)]).status.code(),
        Some(0)
    );

    let trace = out.join("traces").join("normalized_seed0.csv");
    let text = fs::read_to_string(&trace).unwrap();
    let mut tampered = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            tampered.push_str(line);
        } else {
            let mut cols: Vec<String> = line.split(',').map(str::to_string).collect();
            cols[1] = (cols[1].parse::<f64>().unwrap() * 10.0).to_string();
            tampered.push_str(&cols.join(","));
        }
        tampered.push('\n');
    }
    fs::write(&trace, tampered).unwrap();
    let o = otafl(&["bounds", path(&cfg), "--traces", path(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn fingerprint_mismatch_refuses() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_CASE2);
    let out = tmp.path().join("o");
    assert_eq!(
        otafl(&["train", path(&cfg), "--out", path(&out)]).status.code(),
        Some(0)
    );
    let other = write_config(tmp.path(), "other.toml", &format!("{SMALL_CASE2}sigma2 = 2e-7\n"));
    let o = otafl(&["bounds", path(&other), "--traces", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fingerprint mismatch"), "{}", stderr(&o));
    assert!(!out.join("bounds.csv").exists());
}

#[test]
fn env_var_sets_default_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "rounds = 5\nseeds = 1\n");
    let root = tmp.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_otafl"))
        .args(["train", path(&cfg)])
        .env("OTAFL_OUT_DIR", &root)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dirs: Vec<_> = fs::read_dir(&root).unwrap().collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].as_ref().unwrap().path().join("means.csv").exists());
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "rounds = 5\nseeds = 2\n");
    let out = tmp.path().join("o");
    let o = otafl(&[
        "sweep",
        path(&cfg),
        "--param",
        "sigma2",
        "--values",
        "1e-7,1e-9",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("sigma2=1e-7").join("means.csv").exists());
    assert!(out
        .join("sigma2=1e-9")
        .join("traces")
        .join("normalized_seed1.csv")
        .exists());
    let o = otafl(&[
        "sweep",
        path(&cfg),
        "--param",
        "nope",
        "--values",
        "1",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
