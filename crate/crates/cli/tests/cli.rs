use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mixl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixl"))
        .args(args)
        .env_remove("MIXL_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = mixl(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {text}"))
}

fn read_csv(p: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(p).unwrap();
    rdr.records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

fn simulate(dir: &Path, seed: u64) -> PathBuf {
    ok(&[
        "simulate",
        "--seed",
        &seed.to_string(),
        "--persons",
        "30",
        "--tasks",
        "5",
        "--out",
        s(dir),
    ]);
    dir.join("data.csv")
}

fn estimate(data: &Path, out: &Path, family: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "estimate",
        "--data",
        s(data),
        "--family",
        family,
        "--draws",
        "10",
        "--out",
        s(out),
    ];
    args.extend(extra);
    ok(&args);
    out.join(format!("fit_{family}.json"))
}

#[test]
fn simulate_writes_three_deterministic_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "simulate",
            "--seed",
            "42",
            "--persons",
            "25",
            "--tasks",
            "4",
            "--out",
            s(d),
        ]);
    }
    for f in ["data.csv", "truth.csv", "truth_density.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(read_csv(&a.join("data.csv")).len(), 25 * 4 * 4);
}

#[test]
fn usage_errors_exit_two() {
    let out = mixl(&["simulate", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");
    let out = mixl(&["estimate", "--data", "x.csv", "--draws", "0", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mixl(&[
        "estimate", "--data", "x.csv", "--family", "gamma", "--out", "o",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_mixl"))
        .args(["simulate", "--persons", "3", "--tasks", "2"])
        .env("MIXL_OUT_DIR", tmp.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("data.csv").exists());
}

#[test]
fn data_errors_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mixl(&[
        "estimate",
        "--data",
        s(&tmp.path().join("missing.csv")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"]["kind"], "data");
}

#[test]
fn estimate_predict_average_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(&tmp.path().join("sim"), 3);
    let fits = tmp.path().join("fits");
    let paths: Vec<PathBuf> = ["normal", "uniform", "triangular"]
        .iter()
        .map(|f| estimate(&data, &fits, f, &[]))
        .collect();

    let fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&paths[0]).unwrap()).unwrap();
    assert_eq!(fit["convergence"]["status"], "converged");
    assert_eq!(fit["data"]["path"], "../sim/data.csv");
    assert_eq!(read_csv(&fits.join("fit_summary.csv")).len(), 1);

    let ma_dir = tmp.path().join("ma");
    let one = mixl(&["average", s(&paths[0]), "--out", s(&ma_dir)]);
    assert_eq!(one.status.code(), Some(2));
    let mut args = vec!["average"];
    args.extend(paths.iter().map(|p| s(p)));
    args.extend(["--out", s(&ma_dir)]);
    ok(&args);
    let weights = read_csv(&ma_dir.join("ma_weights.csv"));
    assert_eq!(weights.len(), 3);
    let total: f64 = weights.iter().map(|r| r[1].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);

    let pred = tmp.path().join("pred");
    ok(&[
        "predict",
        "--ma",
        s(&ma_dir.join("ma.json")),
        "--out",
        s(&pred),
    ]);
    let shares = read_csv(&pred.join("shares.csv"));
    assert_eq!(
        shares.iter().map(|r| r[1].as_str()).collect::<Vec<_>>(),
        ["branded", "unbranded"]
    );
    let sum: f64 = shares.iter().map(|r| r[2].parse::<f64>().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-10);

    ok(&[
        "density",
        "--ma",
        s(&ma_dir.join("ma.json")),
        "--samples",
        "5000",
        "--out",
        s(&pred),
    ]);
    let rows = read_csv(&pred.join("density.csv"));
    assert_eq!(rows.len(), 6 * 100);
    assert!(rows.iter().all(|r| r[0] == "ma"));
}

#[test]
fn person_set_mismatch_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let a = estimate(
        &simulate(&tmp.path().join("a"), 1),
        &tmp.path().join("fa"),
        "normal",
        &[],
    );
    ok(&[
        "simulate",
        "--seed",
        "2",
        "--persons",
        "31",
        "--tasks",
        "5",
        "--out",
        s(&tmp.path().join("b")),
    ]);
    let b = estimate(
        &tmp.path().join("b/data.csv"),
        &tmp.path().join("fb"),
        "normal",
        &[],
    );
    let out = mixl(&["average", s(&a), s(&b), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out)["error"]["context"]
        .as_str()
        .unwrap()
        .contains("fit_normal.json"));
}

#[test]
fn zero_parameter_fit_predicts_equal_shares() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(&tmp.path().join("sim"), 4);
    let path = estimate(&data, tmp.path(), "uniform", &[]);
    let mut fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    for p in fit["params"].as_array_mut().unwrap() {
        p["estimate"] = 0.0.into();
    }
    fs::write(&path, fit.to_string()).unwrap();
    ok(&["predict", "--fit", s(&path), "--out", s(tmp.path())]);
    for r in read_csv(&tmp.path().join("shares.csv")) {
        assert!((r[2].parse::<f64>().unwrap() - 0.5).abs() < 1e-12, "{r:?}");
    }
}

#[test]
fn lognormal_density_is_negative_and_wtp_needs_wtp_space() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(&tmp.path().join("sim"), 5);
    let ln = estimate(&data, tmp.path(), "lognormal", &[]);
    ok(&[
        "density",
        "--fit",
        s(&ln),
        "--samples",
        "20000",
        "--out",
        s(tmp.path()),
    ]);
    let rows = read_csv(&tmp.path().join("density.csv"));
    let negative = ["branded", "country_foreign", "side_effects", "price"];
    for r in rows.iter().filter(|r| negative.contains(&r[1].as_str())) {
        assert!(r[3].parse::<f64>().unwrap() < 0.0, "{r:?}");
    }
    let out = mixl(&["wtp", "--fit", s(&ln), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));

    let wdir = tmp.path().join("wtp");
    let w = estimate(&data, &wdir, "normal", &["--space", "wtp"]);
    ok(&["wtp", "--fit", s(&w), "--out", s(&wdir)]);
    let rows = read_csv(&wdir.join("wtp.csv"));
    assert_eq!(rows.len(), 5);
    for r in rows {
        assert_eq!(r[2].parse::<f64>().unwrap(), -r[5].parse::<f64>().unwrap());
    }
}

#[test]
fn spec_file_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["spec", "--space", "wtp", "--out", s(tmp.path())]);
    let spec = tmp.path().join("spec.json");
    let data = simulate(&tmp.path().join("sim"), 6);
    let fit = estimate(&data, tmp.path(), "fixed", &["--spec", s(&spec)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(fit).unwrap()).unwrap();
    assert_eq!(v["spec"]["space"], "wtp");
}
