use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bess-game"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("bess-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out-dir").arg(out).env_remove("BESS_WORKERS").output().unwrap()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn solve_writes_coefficients_and_manifest() {
    let out = scratch("solve");
    let o = run(&["solve", "--grid-steps", "6000"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert!(m["command"].get("Solve").is_some());
    assert_eq!(m["solver"], "homogeneous");
    assert_eq!(m["riccati_steps"], 6000);
    assert!(m["config_sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn bad_config_exits_2() {
    let out = scratch("badcfg");
    let cfg = out.join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let o = run(&["solve", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["solve", "--config", out.join("missing.json").to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["frobnicate"], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn strict_wellposedness_exits_4() {
    let out = scratch("strict");
    let o = run(&["solve", "--grid-steps", "6000", "--strict-wellposed"], &out);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn simulate_is_reproducible_across_worker_counts() {
    let a = scratch("sim1");
    let b = scratch("sim2");
    let args = ["simulate", "--paths", "64", "--seed", "3", "--grid-steps", "6000", "--sim-steps", "480"];
    let oa = bin().args(args).arg("--out-dir").arg(&a).env("BESS_WORKERS", "1").output().unwrap();
    let ob = bin().args(args).arg("--out-dir").arg(&b).arg("--workers").arg("3").output().unwrap();
    assert_eq!(oa.status.code(), Some(0), "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(ob.status.code(), Some(0));
    let files = manifest(&a)["outputs"].as_array().unwrap().clone();
    assert!(!files.is_empty());
    for f in files {
        let name = Path::new(f.as_str().unwrap()).file_name().unwrap().to_owned();
        let x = std::fs::read(a.join(&name)).unwrap();
        let y = std::fs::read(b.join(&name)).unwrap();
        assert!(x == y, "{name:?} differs between worker counts");
    }
}

#[test]
fn sizing_defaults_to_arbitrageur_units() {
    let out = scratch("sizing");
    let o = run(&["sizing", "--units", "4", "--major", "1,4", "--paths", "8", "--grid-steps", "6000", "--sim-steps", "240"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sizing.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}
