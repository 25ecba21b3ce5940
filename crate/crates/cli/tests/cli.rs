use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tnf_core::{Complex64, PeriodicSeries};

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn tnf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnf")).args(args).output().unwrap()
}

fn write_series(dir: &Path, name: &str, s: &PeriodicSeries) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string(s).unwrap()).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_value(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// `J_m(x)` from its power series.
fn bessel_j(m: i32, x: f64) -> f64 {
    let order = m.unsigned_abs() as i32;
    let mut term = (x / 2.0).powi(order) / (1..=order).map(f64::from).product::<f64>();
    let mut sum = 0.0;
    for j in 0..30 {
        sum += term;
        term *= -(x * x / 4.0) / ((j + 1) as f64 * (j + 1 + order) as f64);
    }
    if m < 0 && order % 2 == 1 {
        -sum
    } else {
        sum
    }
}

#[test]
fn zero_phase_gives_zero_k() {
    let dir = tempfile::tempdir().unwrap();
    let h = write_series(dir.path(), "h.json", &PeriodicSeries::zeros(2, 2).into_real().unwrap());
    let out = dir.path().join("out");
    let o = tnf(&["fiber-normalize", "--in", h.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let k: PeriodicSeries = serde_json::from_str(&fs::read_to_string(out.join("k.json")).unwrap()).unwrap();
    assert!(k.is_zero());
    for f in ["normalizer.json", "fibering.json", "trace.csv", "k_samples.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let samples = fs::read_to_string(out.join("k_samples.csv")).unwrap();
    assert_eq!(samples.lines().next(), Some("theta,k"));
    assert_eq!(samples.lines().count(), 257);
}

#[test]
fn obstructed_form_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let a = &PeriodicSeries::monomial(2, 1, &[-1, -1], c(1e-5, 0.0)).unwrap()
        + &PeriodicSeries::monomial(2, 1, &[1, 0], c(1e-5, 0.0)).unwrap();
    let p = write_series(dir.path(), "a.json", &a);
    let o = tnf(&["realize", "--in", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("(kn)"), "{}", stderr(&o));
}

#[test]
fn large_density_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let b = PeriodicSeries::cosine(2, 1, &[1, 0], 0.1).unwrap();
    let p = write_series(dir.path(), "b.json", &b);
    let o = tnf(&["moser", "--in", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("(na)"));
}

#[test]
fn moser_writes_report_and_map() {
    let dir = tempfile::tempdir().unwrap();
    let b = &PeriodicSeries::cosine(2, 2, &[1, 1], 5e-4).unwrap() + &PeriodicSeries::sine(2, 2, &[0, 2], 2e-4).unwrap();
    let p = write_series(dir.path(), "b.json", &b);
    let out = dir.path().join("m");
    let o = tnf(&["moser", "--in", p.to_str().unwrap(), "--r", "0.5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = read_value(&out.join("moser.json"));
    assert!(rep["residual"].as_f64().unwrap() <= 1e-9);
    assert_eq!(rep["f_bound_holds"], serde_json::Value::Bool(true));
    assert!(out.join("map.json").exists());
}

#[test]
fn realize_then_invariants_round_trip() {
    // 1 + a = e^{iε sin 2s}, s = θ₁ + θ₂, so ρ₀ = 1 and k = ε sin 2θ
    let eps = 2e-4;
    let terms: Vec<(Vec<i32>, Complex64)> = (-2..=2)
        .map(|m: i32| {
            let v = bessel_j(m, eps) - if m == 0 { 1.0 } else { 0.0 };
            (vec![2 * m, 2 * m], c(v, 0.0))
        })
        .collect();
    let a = PeriodicSeries::from_terms(2, 4, &terms).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pa = write_series(dir.path(), "a.json", &a);
    let pk = write_series(dir.path(), "k_ref.json", &PeriodicSeries::sine(1, 2, &[2], eps).unwrap());
    let real = dir.path().join("real");
    let o = tnf(&[
        "realize",
        "--in",
        pa.to_str().unwrap(),
        "--eps",
        "1e-2",
        "--out",
        real.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let inv = dir.path().join("inv");
    let emb = real.join("embedding.json");
    let o = tnf(&[
        "invariants",
        "--in",
        emb.to_str().unwrap(),
        "--in2",
        pk.to_str().unwrap(),
        "--allow-half-turn",
        "--out",
        inv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = read_value(&inv.join("comparison.json"));
    assert!(cmp["residual"].as_f64().unwrap() <= 1e-6);
    let rep = read_value(&inv.join("invariants.json"));
    assert!((rep["rho0"].as_f64().unwrap() - 1.0).abs() < 1e-10);

    // a reference that differs is reported with exit 1
    let pbad = write_series(dir.path(), "k_bad.json", &PeriodicSeries::sine(1, 2, &[1], eps).unwrap());
    let o = tnf(&[
        "invariants",
        "--in",
        emb.to_str().unwrap(),
        "--in2",
        pbad.to_str().unwrap(),
        "--out",
        inv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(read_value(&inv.join("comparison.json"))["match"], serde_json::Value::Bool(false));
}

#[test]
fn validate_reports_problems() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    fs::write(&good, r#"{"n": 2, "N": 2, "real": true, "coeffs": []}"#).unwrap();
    let o = tnf(&["validate", "--in", good.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok"));

    let dup = dir.path().join("dup.json");
    fs::write(
        &dup,
        r#"{"n": 1, "N": 2, "real": false, "coeffs": [{"k": [1], "re": 1.0, "im": 0.0}, {"k": [1], "re": 2.0, "im": 0.0}]}"#,
    )
    .unwrap();
    let o = tnf(&["validate", "--in", dup.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).contains("duplicate key [1]"));

    let conj = dir.path().join("conj.json");
    fs::write(
        &conj,
        r#"{"n": 1, "N": 2, "real": true, "coeffs": [{"k": [2], "re": 1.0, "im": 0.5}, {"k": [-2], "re": 1.0, "im": 0.5}]}"#,
    )
    .unwrap();
    let o = tnf(&["validate", "--in", conj.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(text.contains("c_[-2]") && text.contains("c_[2]"), "{text}");
}

#[test]
fn schema_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"n": 2, "N": 2, "coeffs": [{"k": [5, 0], "re": 1.0, "im": 0.0}]}"#).unwrap();
    let o = tnf(&["decompose", "--in", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = tnf(&["decompose", "--in", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let o = tnf(&["fiber-normalize", "--bogus"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn homotopy_degree_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let circle = write_series(dir.path(), "c.json", &PeriodicSeries::monomial(1, 1, &[1], c(0.0, -1.0)).unwrap());
    let double = write_series(dir.path(), "d.json", &PeriodicSeries::monomial(1, 2, &[2], c(0.0, -0.5)).unwrap());
    let ellipse = write_series(
        dir.path(),
        "e.json",
        &PeriodicSeries::from_terms(1, 1, &[(vec![1], c(1.5, 0.0)), (vec![-1], c(-0.5, 0.0))]).unwrap(),
    );
    let out = dir.path().join("h");
    let o = tnf(&[
        "homotopy",
        "--in",
        circle.to_str().unwrap(),
        "--in2",
        double.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("(degree-match)"));

    let o = tnf(&[
        "homotopy",
        "--in",
        circle.to_str().unwrap(),
        "--in2",
        ellipse.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("homotopy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    assert!(csv.lines().skip(1).all(|l| l.contains(",true,1")));
}
