//! End-to-end runs of the `genlearn` binary.

use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = r#"
name = "toy"
[model]
preset = "four_well"
[sampler]
method = "exact_inverse_cdf"
n = 3
seed = 11
[kernel]
lengthscale = 0.3
[estimator]
mu = 5.0
gamma = 1e-3
rank = 2
[oracle]
grid_n = 200
[output]
eval_points = 21
"#;

fn genlearn(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genlearn"))
        .args(args)
        .env("GENLEARN_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn toy_fit_round_trips_through_eigs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = genlearn(&["fit", &cfg, "--out", out.to_str().unwrap()], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let o = genlearn(&["eigs", &cfg, "--out", out.to_str().unwrap()], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta, tb);
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    for f in ["config.json", "samples.csv", "eigs.json", "eigenfunctions.csv"] {
        assert!(names.contains(&f), "missing {f} in {names:?}");
    }
    let cfg_json: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    let hash = cfg_json["config_hash"].as_str().unwrap().to_string();
    for (name, bytes) in &ta {
        let text = String::from_utf8_lossy(bytes);
        assert!(text.contains(&hash), "{name} lacks the config hash");
    }
    let eigs = std::fs::read_to_string(a.join("eigenfunctions.csv")).unwrap();
    let header = eigs.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.starts_with("x1,f_hat_1,f_hat_2,oracle_1"));
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(sidecar["command"], "eigs");
    assert!(sidecar["started_unix"].as_f64().is_some());
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TOY);
    let o = genlearn(&["simulate", &cfg], tmp.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(tmp.path().join("toy").join("samples.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn invalid_configs_exit_with_two_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TOY.replace("gamma = 1e-3", "gamma = -1.0"));
    let o = genlearn(&["fit", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("estimator.gamma"));
    assert!(!tmp.path().join("toy").exists());

    let cfg = write_config(tmp.path(), &TOY.replace("[kernel]", "[kernel]\nwidth = 2"));
    let o = genlearn(&["fit", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    let o = genlearn(&["predict", &write_config(tmp.path(), TOY)], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("predict"));
}

#[test]
fn numerical_failures_exit_with_three_and_name_the_module() {
    let tmp = tempfile::tempdir().unwrap();
    // Euler-Maruyama with a huge step leaves the safety box.
    let body = TOY
        .replace("exact_inverse_cdf", "trajectory_subsample")
        .replace("seed = 11", "seed = 11\ndt = 5.0\nburn_in = 10\nstride = 1");
    let o = genlearn(&["simulate", &write_config(tmp.path(), &body)], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[sampling]"));
}

#[test]
fn cir_predict_writes_forecast_and_rmse_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let body = r#"
name = "cir_small"
seeds = [1, 2]
[model]
preset = "cir"
a = 1.0
b = -1.0
sigma = 0.5
[sampler]
method = "exact_gamma"
n = 60
[kernel]
lengthscale = 1.0
[estimator]
mu = 5.0
gamma = 1e-5
rank = 3
[predict]
horizon = 0.5
n_list = [40, 80]
held_out_seed = 3
[output]
eval_points = 11
"#;
    let o = genlearn(&["predict", &write_config(tmp.path(), body)], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("cir_small");
    let rmse = std::fs::read_to_string(dir.join("rmse.csv")).unwrap();
    let rows: Vec<&str> = rmse.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "n,seed,rmse");
    assert_eq!(rows.len(), 5);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("rmse.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"].as_array().unwrap().len(), 2);
    let fc = std::fs::read_to_string(dir.join("forecast.csv")).unwrap();
    assert!(fc.lines().any(|l| l == "x1,predicted,analytic"));
}

#[test]
fn presets_print_as_valid_configs() {
    let tmp = tempfile::tempdir().unwrap();
    for e in ["fourwell", "muller_brown", "cir"] {
        let o = genlearn(&["preset", e], tmp.path());
        assert!(o.status.success());
        let text = String::from_utf8(o.stdout).unwrap();
        assert!(text.contains("[estimator]"));
    }
}
