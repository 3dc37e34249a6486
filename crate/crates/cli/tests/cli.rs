use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kqr::model_file::{load_model, Fit};

fn kqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kqr")).args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(dir: &Path, model: &str, n: usize, seed: u64, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("{model}_{n}_{seed}.csv"));
    let n = n.to_string();
    let seed = seed.to_string();
    let mut args = vec!["simulate", "--model", model, "--n", &n, "--seed", &seed, "--out", path_str(&out)];
    args.extend_from_slice(extra);
    let o = kqr(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

fn parse_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn simulate_is_deterministic_and_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read_to_string(simulate(dir.path(), "yuan", 50, 7, &[])).unwrap();
    let again = dir.path().join("again.csv");
    let o = kqr(&["simulate", "--model", "yuan", "--n", "50", "--seed", "7", "--out", path_str(&again)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(a, std::fs::read_to_string(&again).unwrap());

    let small = std::fs::read_to_string(simulate(dir.path(), "yuan", 5, 7, &[])).unwrap();
    let golden = include_str!("golden/yuan_n5_seed7.csv");
    assert_eq!(small.lines().next(), golden.lines().next());
    for (got, want) in parse_rows(&small).iter().zip(parse_rows(golden)) {
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }
}

#[test]
fn fit_writes_loadable_model_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "yuan", 200, 1, &[]);
    let model = dir.path().join("m.json");
    let o = kqr(&["fit", "--data", path_str(&data), "--tau", "0.5", "--out", path_str(&model)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    for key in ["n=200", "p=2", "tau=0.5", "lambda=", "kkt=", "iterations=", "time="] {
        assert!(line.contains(key), "missing {key} in {line}");
    }
    let m = load_model(&model).unwrap();
    assert!(matches!(m.fit, Fit::Kqr(ref s) if s.certified));

    let pred = dir.path().join("p.csv");
    let o = kqr(&["predict", "--model", path_str(&model), "--data", path_str(&data), "--response", "y", "--out", path_str(&pred)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&pred).unwrap();
    assert!(text.starts_with("index,prediction\n"));
    assert_eq!(text.lines().count(), 201);
}

#[test]
fn joint_fit_reports_crossing() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "heteroscedastic", 60, 2, &[]);
    let model = dir.path().join("n.json");
    let o = kqr(&[
        "fit", "--data", path_str(&data), "--tau", "0.1,0.5,0.9", "--lambda1", "100", "--lambda", "0.01", "--out", path_str(&model),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("crossing_magnitude="));
    let m = load_model(&model).unwrap();
    assert!(matches!(m.fit, Fit::Nckqr(ref s) if s.levels.len() == 3));

    let curves = dir.path().join("c.csv");
    let o = kqr(&["emit-curves", "--model", path_str(&model), "--points", "11", "--out", path_str(&curves)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&curves).unwrap();
    assert!(text.starts_with("x,tau,prediction\n"));
    assert_eq!(text.lines().count(), 1 + 3 * 11);

    let pred = dir.path().join("p.csv");
    let o = kqr(&["predict", "--model", path_str(&model), "--data", path_str(&data), "--response", "y", "--out", path_str(&pred)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&pred).unwrap().starts_with("index,prediction,tau\n"));
}

#[test]
fn invalid_tau_names_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "yuan", 20, 1, &[]);
    let out = dir.path().join("m.json");
    let o = kqr(&["fit", "--data", path_str(&data), "--tau", "1.5", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--tau"));
    assert!(!out.exists());
}

#[test]
fn lambda1_needs_several_levels() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "yuan", 20, 1, &[]);
    let out = dir.path().join("m.json");
    let o = kqr(&["fit", "--data", path_str(&data), "--tau", "0.5", "--lambda1", "10", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--lambda1"));
}

#[test]
fn missing_input_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = dir.path().join("m.json");
    let o = kqr(&["fit", "--data", path_str(&missing), "--tau", "0.5", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.csv"));
}

#[test]
fn unreachable_iteration_cap_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "yuan", 60, 3, &[]);
    let out = dir.path().join("m.json");
    let o = kqr(&[
        "fit", "--data", path_str(&data), "--tau", "0.3", "--lambda", "0.001", "--kkt-tol", "1e-30", "--out", path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(stderr(&o).contains("warning"));
    assert!(out.exists());
}

#[test]
fn cv_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "friedman", 100, 4, &["--p", "10"]);
    let run = |name: &str| {
        let table = dir.path().join(name);
        let o = kqr(&[
            "cv", "--data", path_str(&data), "--tau", "0.5", "--folds", "5", "--seed", "11", "--lambda-count", "8", "--out", path_str(&table),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let selected = stdout(&o).split_whitespace().find(|w| w.starts_with("lambda=")).unwrap().to_string();
        (selected, std::fs::read_to_string(&table).unwrap())
    };
    let (a, ta) = run("a.csv");
    let (b, tb) = run("b.csv");
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert!(ta.starts_with("lambda,mean_loss,std_error\n"));
    assert_eq!(ta.lines().count(), 9);
}

#[test]
fn bench_paths_agree() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("bench.csv");
    let o = kqr(&["bench", "--n", "300", "--lambda-count", "50", "--seed", "2", "--out", path_str(&table)]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let rows = parse_rows_loose(&std::fs::read_to_string(&table).unwrap());
    assert_eq!(rows.len(), 50);
    for r in rows {
        assert!((r[1] - r[2]).abs() <= 1e-6);
    }
}

/// Rows with possibly empty cells, which become NaN.
fn parse_rows_loose(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}
