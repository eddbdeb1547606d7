use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_follmer");

const BASE: &str = r#"
seed = 11

[schedule]
name = "linear-linear"

[target]
kind = "mixture"
eta = 0.0
components = [{ weight = 1.0, mean = [0.5], covariance = [[1.0]] }]

[integrator]
step_count = 200
paths = 2000
record_stride = 50

[fit]
samples = 5000

[analysis]
mc_samples = 200
energy_samples = 1000
permutations = 50
bootstrap = 50
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, command: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(BIN)
        .arg(command)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn sample_is_reproducible_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    let a = run(&cfg, "sample", &tmp.path().join("a"), &["--threads", "1"]);
    let b = run(&cfg, "sample", &tmp.path().join("b"), &["--threads", "3"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(code(&b), 0);
    assert!(stdout(&a).contains("marginal_check: pass"));
    for f in ["ensemble.bin", "summary.json", "manifest.json", "config.toml"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_flag_changes_output_and_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    assert_eq!(code(&run(&cfg, "sample", &tmp.path().join("a"), &[])), 0);
    assert_eq!(code(&run(&cfg, "sample", &tmp.path().join("b"), &["--seed", "12"])), 0);
    let ea = fs::read(tmp.path().join("a/ensemble.bin")).unwrap();
    let eb = fs::read(tmp.path().join("b/ensemble.bin")).unwrap();
    assert_ne!(ea, eb);
    let effective = fs::read_to_string(tmp.path().join("b/config.toml")).unwrap();
    assert!(effective.contains("seed = 12"), "{effective}");
}

#[test]
fn manifest_hashes_match_files() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    let out = tmp.path().join("t");
    assert_eq!(code(&run(&cfg, "tune", &out, &[])), 0);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    for name in ["tune.csv", "kl_sigma.json", "kl_follmer.json", "tune.json", "config.toml"] {
        let bytes = fs::read(out.join(name)).unwrap();
        assert_eq!(files[name]["sha256"], follmer_cli::output::sha256_hex(&bytes), "{name}");
    }
    assert_eq!(manifest["seed"], 11);
}

#[test]
fn missing_seed_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &BASE.replace("seed = 11", ""));
    let o = run(&cfg, "tune", &tmp.path().join("o"), &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    assert_eq!(code(&run(&cfg, "tune", &tmp.path().join("o"), &["--seed", "1"])), 0);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let unknown = write_config(tmp.path(), "u.toml", &format!("{BASE}\nbogus = 1\n"));
    assert_eq!(code(&run(&unknown, "tune", &tmp.path().join("o"), &[])), 2);
    let one = write_config(
        tmp.path(),
        "one.toml",
        &BASE.replace("[analysis]", "[analysis]\nschedules = [{ name = \"linear-linear\" }]"),
    );
    assert_eq!(code(&run(&one, "invariance", &tmp.path().join("o"), &[])), 2);
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    assert_eq!(code(&run(&cfg, "sample", &tmp.path().join("o"), &["--threads", "0"])), 2);
}

#[test]
fn fit_then_sample_with_estimated_drift() {
    let tmp = TempDir::new().unwrap();
    let text = format!("{BASE}\n[drift]\nkind = \"estimated\"\nestimator = \"fit/estimator.json\"\n");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let f = run(&cfg, "fit", &tmp.path().join("fit"), &[]);
    assert_eq!(code(&f), 0, "{}", String::from_utf8_lossy(&f.stderr));
    assert!(stdout(&f).contains("final_loss:"));
    let loss = fs::read_to_string(tmp.path().join("fit/loss.csv")).unwrap();
    assert!(loss.starts_with("t,loss,floor,c0,c1\n"), "{loss}");
    let s = run(&cfg, "sample", &tmp.path().join("s"), &[]);
    assert_eq!(code(&s), 0, "{}", String::from_utf8_lossy(&s.stderr));
    assert!(stdout(&s).contains("marginal_check: pass"));
}

#[test]
fn estimator_dimension_mismatch_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    assert_eq!(code(&run(&cfg, "fit", &tmp.path().join("fit"), &[])), 0);
    let two_d = BASE.replace(
        "components = [{ weight = 1.0, mean = [0.5], covariance = [[1.0]] }]",
        "components = [{ weight = 1.0, mean = [0.0, 0.0], covariance = [[1.0, 0.0], [0.0, 1.0]] }]",
    );
    let text = format!("{two_d}\n[drift]\nkind = \"estimated\"\nestimator = \"fit/estimator.json\"\n");
    let cfg2 = write_config(tmp.path(), "c2.toml", &text);
    assert_eq!(code(&run(&cfg2, "sample", &tmp.path().join("s"), &[])), 2);
}

#[test]
fn exploding_estimator_is_a_simulation_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", BASE);
    assert_eq!(code(&run(&cfg, "fit", &tmp.path().join("fit"), &[])), 0);
    let path = tmp.path().join("fit/estimator.json");
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    for knot in doc["coefficients"].as_array_mut().unwrap() {
        for c in knot.as_array_mut().unwrap() {
            *c = serde_json::json!(1e300);
        }
    }
    fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
    let text = format!("{BASE}\n[drift]\nkind = \"estimated\"\nestimator = \"fit/estimator.json\"\n");
    let cfg2 = write_config(tmp.path(), "c2.toml", &text);
    let o = run(&cfg2, "sample", &tmp.path().join("s"), &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn rank_deficient_design_is_a_fitting_error() {
    let tmp = TempDir::new().unwrap();
    let text = BASE.replace(
        "[fit]\nsamples = 5000",
        "[fit]\nsamples = 1000\nestimator = { basis = { kind = \"radial\", centers = [[0.0], [0.0]], bandwidth = 1.0 }, allow_ridge = false }",
    );
    let cfg = write_config(tmp.path(), "c.toml", &text);
    assert_eq!(code(&run(&cfg, "fit", &tmp.path().join("fit"), &[])), 4);
}

#[test]
fn tune_table_has_requested_rows() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &BASE.replace("[analysis]", "[analysis]\ntable_points = 9"));
    let out = tmp.path().join("t");
    let o = run(&cfg, "tune", &out, &[]);
    assert_eq!(code(&o), 0);
    let table = fs::read_to_string(out.join("tune.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "t,sigma,g_follmer,a_ref,alpha,gamma,psi_min");
    assert_eq!(lines.len(), 10);
    // Linear-linear: g^F(0.5)² = (1 − t)(1 + t) = 0.75.
    let mid: Vec<f64> = lines[5].split(',').map(|v| v.parse().unwrap()).collect();
    assert!((mid[0] - 0.5).abs() < 1e-15);
    assert!((mid[2] * mid[2] - 0.75).abs() < 1e-12);
}

#[test]
fn invariance_agrees_across_schedules() {
    let tmp = TempDir::new().unwrap();
    let text = BASE.replace(
        "[analysis]",
        "[analysis]\nschedules = [{ name = \"linear-linear\" }, { name = \"trigonometric\" }]",
    );
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = tmp.path().join("i");
    let o = run(&cfg, "invariance", &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("invariance.json")).unwrap()).unwrap();
    assert!(report["max_gap"].as_f64().unwrap() < 0.01);
}

#[test]
fn diagnose_passes_on_smoothed_mixture() {
    let tmp = TempDir::new().unwrap();
    let text = BASE.replace(
        "eta = 0.0\ncomponents = [{ weight = 1.0, mean = [0.5], covariance = [[1.0]] }]",
        "eta = 0.2\ncomponents = [{ weight = 0.5, mean = [-1.0], covariance = [[0.3]] }, { weight = 0.5, mean = [1.0], covariance = [[0.3]] }]",
    );
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let out = tmp.path().join("d");
    let o = run(&cfg, "diagnose", &out, &[]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnose.json")).unwrap()).unwrap();
    let lips = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["name"] == "lipschitz_bound" && c["status"] == "pass")
        .count();
    assert_eq!(lips, 3);
}
