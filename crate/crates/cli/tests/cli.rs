use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "name": "small",
  "seed": 11,
  "landmarks": {"points": [[0.3, 0.5], [0.6, 0.45]]},
  "momenta": {"uniform": [0.2, 0.0]},
  "kernel": {"kind": "gaussian", "scale": 0.2},
  "noise": {"grid": {"kind": "gaussian", "n_per_side": 3, "extent": {"lower": [0, 0], "upper": [1, 1]},
                     "scale": 0.3, "families": [[0.05, 0.0], [0.0, 0.05]]}},
  "sim": {"t_end": 1.0, "steps": 100},
  "sampling": {"n_samples": 40, "record_paths": 3, "record_every": 10},
  "moments": {"steps": 100, "record_every": 10},
  "shoot": {"target": [[0.45, 0.55], [0.8, 0.5]]}
}"#;

fn stochlm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochlm")).args(args).current_dir(dir).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(task: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![task, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    stochlm(&args, cfg.parent().unwrap())
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("simulate", &cfg, &a, &[]).status.success());
    assert!(run("simulate", &cfg, &b, &[]).status.success());
    for f in ["endpoints.csv", "paths.csv", "deterministic.csv", "noise_fields.csv", "config.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
    let m: serde_json::Value = serde_json::from_slice(&read(a.join("manifest.json"))).unwrap();
    assert_eq!(m["task"], "simulate");
    assert_eq!(m["seed"], 11);
    assert!(m["files"].as_array().unwrap().iter().any(|f| f["path"] == "endpoints.csv"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("simulate", &cfg, &a, &[]).status.success());
    assert!(run("simulate", &cfg, &b, &["--seed", "12"]).status.success());
    assert_ne!(read(a.join("endpoints.csv")), read(b.join("endpoints.csv")));
    // the deterministic flow does not depend on the seed
    assert_eq!(read(a.join("deterministic.csv")), read(b.join("deterministic.csv")));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("moments", &cfg, &a, &[]).status.success());
    let resolved = a.join("config.json");
    assert!(run("moments", &resolved, &b, &[]).status.success());
    assert_eq!(read(a.join("config.json")), read(b.join("config.json")));
    assert_eq!(read(a.join("moments.csv")), read(b.join("moments.csv")));
}

#[test]
fn shoot_writes_a_converged_result() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out = dir.path().join("s");
    assert!(run("shoot", &cfg, &out, &[]).status.success());
    let r: serde_json::Value = serde_json::from_slice(&read(out.join("shoot.json"))).unwrap();
    assert_eq!(r["converged"], true);
    assert!(r["mismatch"].as_f64().unwrap() < 1e-6);
}

#[test]
fn bad_input_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = dir.path().join("missing.json");
    assert_eq!(run("simulate", &missing, &out, &[]).status.code(), Some(2));

    let typo = write_config(dir.path(), "typo.json", &SMALL.replace("\"n_samples\"", "\"n_sample\""));
    let o = run("simulate", &typo, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sampling"), "{}", String::from_utf8_lossy(&o.stderr));

    // a task whose block is absent
    let cfg = write_config(dir.path(), "small.json", SMALL);
    assert_eq!(run("bridge", &cfg, &out, &[]).status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_stochlm"))
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("STOCHLM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = stochlm(&["plot"], dir.path());
    assert!(!o.status.success());
}
