use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use microtopt::RveMesh;
use microtopt_cli::DensityField;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_microtopt"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn solid(dir: &Path, n: usize) -> PathBuf {
    let mesh = RveMesh::build(n, n, 1.0, 1.0, 0.3).unwrap();
    let path = dir.join("solid.txt");
    DensityField::new(&mesh, vec![1.0; n * n]).unwrap().save(&path).unwrap();
    path
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let k = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.filter(|l| !l.starts_with('#')).map(|l| l.split(',').nth(k).unwrap().parse().unwrap()).collect()
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[mesh]\nnz = 4\n").unwrap();
    let out = run(&["optimize", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["homogenize", "--density", "missing.txt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn solid_homogenize_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let density = solid(dir.path(), 4);
    let out = run(&["homogenize", "--density", density.to_str().unwrap(), "--out", "h", "--samples", "5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("h/stress_strain.csv")).unwrap();
    let s22 = column(&csv, "S22");
    assert_eq!(s22.len(), 6);
    assert_eq!(s22[0], 0.0);
    assert!(s22.windows(2).all(|w| w[1] > w[0]));
    let tangent = std::fs::read_to_string(dir.path().join("h/tangent.csv")).unwrap();
    assert_eq!(column(&tangent, "C22").len(), 6);
}

#[test]
fn zero_strain_gives_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let density = solid(dir.path(), 3);
    std::fs::write(dir.path().join("zero.toml"), "[problem]\napplied_strain = [0.0, 0.0, 0.0]\n").unwrap();
    let out =
        run(&["homogenize", "--config", "zero.toml", "--density", density.to_str().unwrap(), "--out", "z"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("z/stress_strain.csv")).unwrap();
    assert_eq!(column(&csv, "S22"), vec![0.0]);
}

#[test]
fn gradcheck_on_solid_passes() {
    let dir = tempfile::tempdir().unwrap();
    let density = solid(dir.path(), 8);
    let out = run(&["gradcheck", "--density", density.to_str().unwrap(), "--samples", "4", "--seed", "7"], dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout.matches("PASS").count(), 4);
}

#[test]
fn gradcheck_without_samples_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let density = solid(dir.path(), 4);
    let out = run(&["gradcheck", "--density", density.to_str().unwrap(), "--samples", "0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

const UNIFORM: &str = "
[mesh]
nx = 6
ny = 6
[problem]
v_max = 1.0
r_min = 0.25
[target.layout]
kind = \"uniform\"
value = 1.0
[initial.layout]
kind = \"uniform\"
value = 1.0
";

#[test]
fn matching_start_stops_immediately() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("u.toml"), UNIFORM).unwrap();
    let out = run(&["optimize", "--config", "u.toml", "--out", "o"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(dir.path().join("o/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert_eq!(column(&history, "objective"), vec![0.0]);
    for f in ["final_density.txt", "final_density.csv", "final_tangent.csv", "target_tangent.csv", "target_density.txt"]
    {
        assert!(dir.path().join("o").join(f).exists(), "{f}");
    }
}

const SMALL: &str = "
[mesh]
nx = 6
ny = 6
[problem]
v_max = 0.6
r_min = 0.25
applied_strain = [0.0, 0.05, 0.0]
max_iterations = 6
[target.layout]
kind = \"circular_holes\"
center_radius = 0.3
corner_radius = 0.2
[initial]
noise = 0.1
[initial.layout]
kind = \"uniform\"
value = 0.5
";

#[test]
fn same_seed_gives_identical_history() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), SMALL).unwrap();
    let a = run(&["optimize", "--config", "s.toml", "--out", "a", "--seed", "11"], dir.path());
    let b = run(&["optimize", "--config", "s.toml", "--out", "b", "--seed", "11", "--threads", "2"], dir.path());
    let c = run(&["optimize", "--config", "s.toml", "--out", "c", "--seed", "12"], dir.path());
    for o in [&a, &b, &c] {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &str| std::fs::read_to_string(dir.path().join(d).join("history.csv")).unwrap();
    assert_eq!(read("a").lines().count(), 7);
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
