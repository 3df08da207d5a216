use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn uitsde(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("experiment.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_uitsde"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out").join(name)).unwrap()).unwrap()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

const TTE_SMOKE: &str = "problem.name = \"fig1\"
scheme.kind = \"tte\"
scheme.delta = 0.05
scheme.alpha = 1.3
x0 = [100.0]
horizon = 1.0
n_paths = 100
observables = [\"x\", \"arctan\"]
";

#[test]
fn simulate_writes_headers_with_seed_and_hash() {
    let dir = TempDir::new().unwrap();
    let o = uitsde(dir.path(), &["simulate", "--seed", "77"], TTE_SMOKE);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/simulate_x.csv")).unwrap();
    assert!(csv.starts_with("# tool: uitsde "));
    assert!(csv.contains("# seed: 77\n"));
    assert!(csv.contains("# alpha: 1.3\n"));
    assert!(csv.lines().any(|l| l.starts_with("# config_sha256: ") && l.len() == 17 + 64));
    assert!(dir.path().join("out/simulate_arctan.csv").exists());
    assert!(dir.path().join("out/moments_p2.csv").exists());
    assert_eq!(json(dir.path(), "simulate.json")["seed"], 77);
}

#[test]
fn reruns_reproduce_data_across_thread_counts() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert!(uitsde(a.path(), &["simulate", "--threads", "1"], TTE_SMOKE).status.success());
    assert!(uitsde(b.path(), &["simulate", "--threads", "3"], TTE_SMOKE).status.success());
    for f in ["simulate_x.csv", "simulate_arctan.csv", "moments_p2.csv"] {
        let x = fs::read_to_string(a.path().join("out").join(f)).unwrap();
        let y = fs::read_to_string(b.path().join("out").join(f)).unwrap();
        assert_eq!(data_lines(&x), data_lines(&y), "{f}");
    }
}

#[test]
fn negative_delta_is_a_config_error_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let o = uitsde(dir.path(), &["simulate"], "scheme.kind = \"tte\"\nscheme.delta = -0.05\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scheme.delta"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let o = uitsde(dir.path(), &["simulate"], "n_pahts = 10\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_pahts"));
}

#[test]
fn explicit_euler_from_one_hundred_blows_up() {
    let dir = TempDir::new().unwrap();
    let o = uitsde(
        dir.path(),
        &["simulate"],
        "problem.name = \"fig1\"\nscheme.kind = \"em\"\nscheme.delta = 0.05\nx0 = [100.0]\nn_paths = 50\n",
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("blew up"), "{}", stderr(&o));
}

#[test]
fn order_with_two_deltas_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = uitsde(
        dir.path(),
        &["order"],
        "problem.name = \"fig1\"\nscheme.kind = \"tte\"\nscheme.delta = 0.1\norder.deltas = [0.1, 0.05]\nrecord.every = 0.1\n",
    );
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("need >= 3 deltas"), "{}", stderr(&o));
}

#[test]
fn order_against_exact_ou_mean() {
    let dir = TempDir::new().unwrap();
    let o = uitsde(
        dir.path(),
        &["order"],
        "problem.name = \"ou\"\nproblem.sigma = 0.05\nscheme.kind = \"em\"\nscheme.delta = 0.2\n\
         reference.kind = \"exact\"\nx0 = [1.0]\nrecord.every = 0.2\nn_paths = 5000\n",
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let beta = json(dir.path(), "order.json")["result"]["beta"].as_f64().unwrap();
    assert!((beta - 1.0).abs() < 0.15, "beta {beta}");
}

#[test]
fn ses_on_ou_reports_unit_rate() {
    let dir = TempDir::new().unwrap();
    let o = uitsde(
        dir.path(),
        &["ses"],
        "problem.name = \"ou\"\nobservables = [\"x\"]\nses.points = [[-1.0], [1.0]]\nrecord.every = 0.1\nn_paths = 200\n",
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let gamma = json(dir.path(), "ses.json")["result"]["gamma_hat"].as_f64().unwrap();
    assert!((gamma - 1.0).abs() <= 0.05, "gamma {gamma}");
}

#[test]
fn check_passes_ses_groups_for_the_cubic_example() {
    let dir = TempDir::new().unwrap();
    let o = uitsde(dir.path(), &["check"], "problem.name = \"cubic1d\"\nproblem.b = 0.3\n");
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(dir.path(), "assumptions.json");
    let groups = r["result"]["groups"].as_array().unwrap();
    for id in ["ses_first_order", "ses_second_order"] {
        let g = groups.iter().find(|g| g["id"] == id).unwrap();
        assert_eq!(g["pass"], true, "{id}");
    }
}

#[test]
fn fig1_writes_one_file_per_curve_and_a_summary() {
    let dir = TempDir::new().unwrap();
    let o = uitsde(
        dir.path(),
        &["fig1"],
        "fig1.n_paths = 50\nfig1.reference_paths = 100\nfig1.reference_delta = 0.005\nfig1.horizon = 0.5\n",
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for x0 in ["1", "100"] {
        for curve in ["reference", "tamed", "tte_alpha_1", "tte_alpha_1.3", "tte_alpha_5"] {
            assert!(out.join(format!("fig1_x0_{x0}_{curve}.csv")).exists(), "{x0} {curve}");
        }
    }
    let s = json(dir.path(), "fig1_summary.json");
    let runs = s["result"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert!(runs[1]["largest_tte_sup_deviation"].is_string());
    assert_eq!(runs[1]["curves"].as_array().unwrap().len(), 4);
}

#[test]
fn json_configs_are_accepted() {
    let dir = TempDir::new().unwrap();
    let o = uitsde(
        dir.path(),
        &["moments"],
        r#"{"scheme": {"kind": "splitstep", "delta": 0.05}, "x0": [100.0], "horizon": 1.0, "n_paths": 50}"#,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("out/moments_p2.csv").exists());
}
