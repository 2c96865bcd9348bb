use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_subwalk"))
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.json"))
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("subwalk-cli-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(cfg).arg("--out").arg(out).arg("--quiet").output().unwrap()
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = scratch("missing");
    let o = run(&["reduce"], &out.join("nope.json"), &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_flag_is_a_config_error() {
    let o = bin().arg("reduce").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_coefficient_reports_its_offset() {
    let dir = scratch("malformed");
    let text = std::fs::read_to_string(config("grushin1")).unwrap();
    let bad = text.replace("sin(pi*x1)^2", "sin(*x1)^2");
    assert_ne!(bad, text);
    let path = dir.join("bad.json");
    std::fs::write(&path, bad).unwrap();
    let o = run(&["reduce"], &path, &dir);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("byte 4"), "{err}");
}

#[test]
fn wrong_schema_version_is_rejected() {
    let dir = scratch("schema");
    let text = std::fs::read_to_string(config("laplace1d")).unwrap();
    let path = dir.join("old.json");
    std::fs::write(&path, text.replace("\"schema_version\": 1", "\"schema_version\": 99")).unwrap();
    assert_eq!(run(&["reduce"], &path, &dir).status.code(), Some(2));
}

#[test]
fn reduce_reports_grushin_exponents() {
    let dir = scratch("reduce");
    let o = run(&["reduce"], &config("grushin1"), &dir);
    assert_eq!(o.status.code(), Some(0));
    let summary = std::fs::read_to_string(dir.join("reduce").join("summary.txt")).unwrap();
    assert!(summary.contains("κ = (1,2)"), "{summary}");
    assert!(dir.join("reduce").join("blocks.csv").exists());
}

#[test]
fn walk_csv_is_byte_identical_for_a_fixed_seed() {
    let (a, b, c) = (scratch("det-a"), scratch("det-b"), scratch("det-c"));
    let cfg = config("laplace1d");
    assert_eq!(run(&["walk"], &cfg, &a).status.code(), Some(0));
    assert_eq!(run(&["walk"], &cfg, &b).status.code(), Some(0));
    assert_eq!(run(&["walk", "--seed", "7"], &cfg, &c).status.code(), Some(0));
    let read = |d: &Path| std::fs::read(d.join("walk").join("walk_endpoints.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn spectrum_writes_a_gap_table() {
    let dir = scratch("spectrum");
    let o = run(&["spectrum"], &config("laplace1d"), &dir);
    assert!(matches!(o.status.code(), Some(0) | Some(1)));
    let csv = std::fs::read_to_string(dir.join("spectrum").join("gaps.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("h,"));
    assert_eq!(lines.count(), 4);
}
