use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

use ttsa_cli::ExperimentConfig;

/// Fresh scratch directory under the system temp dir.
fn scratch(tag: &str) -> PathBuf {
    static NEXT: AtomicUsize = AtomicUsize::new(0);
    let dir = std::env::temp_dir().join(format!(
        "ttsa-cli-{tag}-{}-{}",
        std::process::id(),
        NEXT.fetch_add(1, Ordering::Relaxed)
    ));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn ttsa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttsa"))
        .args(args)
        .current_dir(dir)
        .env_remove("TTSA_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const IDENTITY: &str = r#"{
  "system": { "inline": {
    "spec": { "gamma1": [[1, 0], [0, 1]], "w1": [[0, 0], [0, 0]], "v1": [1, -1],
              "gamma2": [[0, 0], [0, 0]], "w2": [[1, 0], [0, 1]], "v2": [0.5, 2] },
    "noise": { "sphere": { "c": 0.1 } } } },
  "schedule": { "alpha": 0.8, "beta": 0.5 },
  "horizon": 2000
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn constants_on_identity_spec() {
    let dir = scratch("constants");
    let cfg = write_config(&dir, IDENTITY);
    let o = ttsa(&["constants", "--config", &cfg, "--out", "out"], &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.join("out/constants.json")).unwrap();
    assert!(text.contains("\"C_R_theta\": 3.0"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(json.is_object() || json.is_array());
}

#[test]
fn run_csv_is_byte_identical() {
    let dir = scratch("run");
    let cfg = write_config(&dir, IDENTITY);
    for out in ["a", "b"] {
        let o = ttsa(&["run", "--config", &cfg, "--seeds", "1", "--out", out], &dir);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.join("a/run.csv")).unwrap();
    let b = std::fs::read(dir.join("b/run.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("seed,n,err_theta,err_w"));
    // 40 default checkpoints, all below the horizon.
    assert_eq!(lines.count(), 40);
}

#[test]
fn equal_exponents_name_assumption_a2() {
    let dir = scratch("a2");
    let cfg = write_config(&dir, &IDENTITY.replace("\"beta\": 0.5", "\"beta\": 0.8"));
    let o = ttsa(&["rates", "--config", &cfg, "--out", "out"], &dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("A2"), "{}", stderr(&o));

    let o = ttsa(&["constants", "--alpha", "0.6", "--beta", "0.6", "--out", "out"], &dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("A2"));
}

#[test]
fn config_round_trip() {
    let cfg = ExperimentConfig::from_json(IDENTITY).unwrap();
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    let d = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_json(&d.to_json()).unwrap(), d);
    assert_eq!(d.checkpoint_list().unwrap().len(), 40);
    assert!(ExperimentConfig::from_json(r#"{"horizon": 10}"#).is_err());
    assert!(ExperimentConfig::from_json(&IDENTITY.replace("\"horizon\"", "\"horizn\"")).is_err());
}

#[test]
fn outputs_stay_inside_the_output_directory() {
    let dir = scratch("escape");
    for name in ["../escaped.csv", "/tmp/escaped.csv", "sub/../../escaped.csv"] {
        let text = IDENTITY.replace("\"horizon\": 2000", &format!("\"horizon\": 100, \"outputs\": {{ \"csv\": \"{name}\" }}"));
        let cfg = write_config(&dir, &text);
        let o = ttsa(&["run", "--config", &cfg, "--out", "out"], &dir);
        assert_eq!(o.status.code(), Some(1), "{name}");
        assert!(stderr(&o).contains("outputs.csv"));
    }
    assert!(!dir.join("escaped.csv").exists());
    assert!(!dir.join("out").exists());
}

#[test]
fn mdp_gen_feeds_a_gtd_config() {
    let dir = scratch("mdp");
    let o = ttsa(&["mdp-gen", "--out", "."], &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let mdp: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("mdp.json")).unwrap()).unwrap();
    assert!(mdp.is_object());

    let cfg = write_config(
        &dir,
        r#"{ "system": { "gtd": { "variant": "gtd2", "mdp_file": "mdp.json" } },
             "schedule": { "alpha": 0.8, "beta": 0.5 }, "horizon": 500, "n0": 10 }"#,
    );
    let o = ttsa(&["decompose", "--config", &cfg, "--out", "out"], &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("out/decompose.json")).unwrap()).unwrap();
    assert!(rep["residual_theta"].as_f64().unwrap() <= 1e-8);
    assert!(rep["residual_w"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn thread_variable_is_validated() {
    let dir = scratch("threads");
    let cfg = write_config(&dir, IDENTITY);
    for (value, code) in [("zero", 1), ("0", 1), ("2", 0)] {
        let o = Command::new(env!("CARGO_BIN_EXE_ttsa"))
            .args(["run", "--config", &cfg, "--horizon", "200", "--out", "out"])
            .current_dir(&dir)
            .env("TTSA_THREADS", value)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(code), "{value}: {}", stderr(&o));
    }
}

#[test]
fn argument_errors() {
    assert_eq!(ttsa_cli::run_cli(["ttsa", "bogus"]), 1);
    assert_eq!(ttsa_cli::run_cli(["ttsa"]), 1);
    assert_eq!(ttsa_cli::run_cli(["ttsa", "--help"]), 0);
    assert_eq!(ttsa_cli::run_cli(["ttsa", "run", "--alpha", "0.8"]), 1);
    assert_eq!(ttsa_cli::run_cli(["ttsa", "run", "--variant", "td"]), 1);

    let dir = scratch("mode");
    let cfg = write_config(&dir, &IDENTITY.replacen('{', r#"{ "mode": "constants","#, 1));
    let o = ttsa(&["run", "--config", &cfg, "--out", "out"], &dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mode"));
    let o = ttsa(&["run", "--config", "missing.json"], &dir);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn lower_bound_needs_thirty_seeds() {
    let dir = scratch("lb");
    let cfg = write_config(&dir, IDENTITY);
    let o = ttsa(&["lower-bound", "--config", &cfg, "--seeds", "5", "--horizon", "100", "--out", "out"], &dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seeds"));
    let o = ttsa(&["lower-bound", "--config", &cfg, "--seeds", "30", "--horizon", "300", "--out", "out"], &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("out/lower_bound.csv").exists());
}

#[test]
fn rates_writes_report() {
    let dir = scratch("rates");
    let o = ttsa(&["rates", "--variant", "gtd2", "--seeds", "3", "--horizon", "5000", "--out", "out"], &dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("out/rates.json")).unwrap()).unwrap();
    assert!(rep["report"]["slope_theta"].as_f64().unwrap().is_finite());
    assert!(!rep["rows"].as_array().unwrap().is_empty());
}
