use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "horizon": 80,
  "support": {"size": 10},
  "sigmas": {"values": [1e-3, 1.0]},
  "trials": 200,
  "fig2": {"horizons": [50, 100], "trials": 3, "support_size": 10}
}"#;

fn ddrobust(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddrobust"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("spawn ddrobust")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn csv(dir: &Path, name: &str) -> Vec<Vec<String>> {
    fs::read_to_string(dir.join(name))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_through_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "cfg.json", SMALL);
    let data = d.join("data.json").to_string_lossy().into_owned();
    let jac = d.join("jacobian.json").to_string_lossy().into_owned();

    assert_ok(&ddrobust(d, &["collect", "--config", &cfg]));
    assert_ok(&ddrobust(d, &["design", "--config", &cfg, "--data", &data]));
    let controller: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("controller.json")).unwrap()).unwrap();
    assert!(controller["rho"].as_f64().unwrap() < 1.0);
    assert_eq!(controller["stable"], true);

    assert_ok(&ddrobust(
        d,
        &["jacobian", "--config", &cfg, "--data", &data],
    ));
    assert_eq!(csv(d, "jacobian.csv").len(), 11);

    assert_ok(&ddrobust(
        d,
        &[
            "bounds",
            "--config",
            &cfg,
            "--data",
            &data,
            "--jacobian",
            &jac,
            "--sigma",
            "1e-3",
        ],
    ));
    let rows = csv(d, "bounds.csv");
    assert_eq!(rows[0][6], "lower");
    assert_eq!(rows.len(), 2);
    assert!(rows[1][6].parse::<f64>().unwrap() <= 1.0);

    assert_ok(&ddrobust(
        d,
        &[
            "mc",
            "--config",
            &cfg,
            "--data",
            &data,
            "--jacobian",
            &jac,
            "--mode",
            "first-order",
        ],
    ));
    let rows = csv(d, "mc.csv");
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][5], "first_order");
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path(), "cfg.json", SMALL);
    for dir in [a.path(), b.path()] {
        assert_ok(&ddrobust(
            dir,
            &["mc", "--config", &cfg, "--trials", "300", "--seed", "7"],
        ));
        assert_ok(&ddrobust(dir, &["fig2", "--config", &cfg]));
    }
    for name in ["mc.csv", "mc.json", "fig2.csv"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let other = tempfile::tempdir().unwrap();
    assert_ok(&ddrobust(
        other.path(),
        &["mc", "--config", &cfg, "--trials", "300", "--seed", "8"],
    ));
    assert_ne!(
        fs::read(a.path().join("mc.json")).unwrap(),
        fs::read(other.path().join("mc.json")).unwrap()
    );
}

#[test]
fn fig1_rows_follow_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", SMALL);
    assert_ok(&ddrobust(dir.path(), &["fig1", "--config", &cfg]));
    let rows = csv(dir.path(), "fig1.csv");
    assert_eq!(
        rows[0],
        [
            "sigma",
            "lower",
            "p_hat",
            "ci_low",
            "ci_high",
            "upper_clamped"
        ]
    );
    assert_eq!(rows.len(), 3);
    for row in &rows[1..] {
        let v: Vec<f64> = row.iter().map(|c| c.parse().unwrap()).collect();
        assert!(v[1] >= 2.2e-16 && v[5] >= 2.2e-16);
        assert!(v[3] <= v[2] && v[2] <= v[4]);
    }
}

#[test]
fn failures_exit_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = ddrobust(d, &["design", "--data", "missing.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let bad = write_config(d, "bad.json", r#"{"horizon": 50, "colour": "red"}"#);
    let out = ddrobust(d, &["collect", "--config", &bad]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let pinv = write_config(
        d,
        "pinv.json",
        r#"{"horizon": 60, "map": {"name": "pinv"}, "support": {"size": 5}}"#,
    );
    let out = ddrobust(d, &["design", "--config", &pinv]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not stabilizing"));
    let out = ddrobust(d, &["fig1", "--config", &pinv]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rho"));
}
