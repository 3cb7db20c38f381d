use std::path::Path;
use std::process::{Command, Output};

fn mfgsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgsim")).args(args).current_dir(dir).output().unwrap()
}

fn preset(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/presets").join(format!("{name}.json"));
    std::fs::read_to_string(path).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn negative_a_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let bad = preset("fig1").replacen("\"a\": [1e-4, 1e-4]", "\"a\": [-1e-4, 1e-4]", 1);
    let cfg = write_config(dir.path(), "bad.json", &bad);
    let out = mfgsim(&["validate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("a[0]"), "{err}");

    let good = write_config(dir.path(), "good.json", &preset("fig1"));
    assert_eq!(mfgsim(&["validate", "--config", &good], dir.path()).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mfgsim(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(mfgsim(&["solve", "--steps", "x"], dir.path()).status.code(), Some(1));
    assert_eq!(mfgsim(&["reproduce", "fig9"], dir.path()).status.code(), Some(1));
}

#[test]
fn solve_writes_header_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &preset("fig1"));
    let out = mfgsim(&["solve", "--config", &cfg, "--steps", "10", "--out", "odes.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("odes.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,h2_1,h2_2,g2_11,g2_12,g2_21,g2_22");
    assert_eq!(csv.lines().count(), 12);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("odes.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["grid"]["steps"], 10);
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn filter_demo_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &preset("fig2"));
    let out = mfgsim(&["filter-demo", "--config", &cfg, "--steps", "20", "--paths", "1", "--out", "p.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,F,theta,pi_1_1,pi_1_2,pi_2_1,pi_2_2,z_1,z_2,ahat_1,ahat_2");
    assert_eq!(csv.lines().count(), 22);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &preset("fig3"));
    let sim = |name: &str| {
        let out = mfgsim(
            &["simulate", "--config", &cfg, "--steps", "30", "--paths", "2", "--seed", "42", "--out", name],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.path().join(name)).unwrap()
    };
    let (a, b) = (sim("a.csv"), sim("b.csv"));
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "path,t,agent_id,subpop,q,nu,x,S,F,q_bar,nu_bar,g1");
    assert_eq!(text.lines().count(), 1 + 2 * 31 * 60);

    let rep = |name: &str| {
        let out = mfgsim(
            &["reproduce", "fig1", "--steps", "30", "--paths", "300", "--threads", "2", "--out", name],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
        std::fs::read(dir.path().join(name)).unwrap()
    };
    assert_eq!(rep("f1.csv"), rep("f2.csv"));
}

#[test]
fn fitted_model_drives_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &preset("fig2"));
    let common = ["--config", &cfg, "--steps", "25", "--paths", "200", "--degree", "2"];
    let fit = mfgsim(&[&["lsmc"][..], &common, &["--out", "m.bin"]].concat(), dir.path());
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));
    let sim = mfgsim(&["simulate", "--config", &cfg, "--steps", "25", "--model", "m.bin", "--out", "s.csv"], dir.path());
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let wrong = mfgsim(&["simulate", "--config", &cfg, "--steps", "26", "--model", "m.bin"], dir.path());
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn sweep_and_probe_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &preset("fig3"));
    let out = mfgsim(
        &["sweep", "--config", &cfg, "--steps", "20", "--paths", "200", "--dpi0", "0:0.3:2", "--out", "s.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("s.csv")).unwrap().lines().count(), 3);

    let out = mfgsim(
        &["nash-probe", "--config", &cfg, "--steps", "20", "--paths", "50", "--n", "4,8", "--out", "n.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("n.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "n,deviation,half_width,eps,gain,gain_se,is_max");
    assert_eq!(csv.lines().count(), 1 + 2 * 6);
}
