//! Batch front end: reads coefficient files, runs one computation, writes
//! JSON reports and CSV traces/samples into an output directory.
//!
//! Exit codes: 0 success, 1 internal or numerical failure, 2 refusal on a
//! named hypothesis, 3 malformed input.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use tnf_core::curve::{embedding_check, gauss_degree, noncritical_phase, CurveImmersion, WhitneyHomotopy};
use tnf_core::fibering::{fibering_normalize, k_uniqueness_residual, FiberingPhase, KamSchedule, KamTrace, TraceKind};
use tnf_core::moser::{moser_normalize, moser_normalize_with, VolumeDensity};
use tnf_core::pipeline::{theorem_m_normalize_with, PipelineConfig, TorusEmbedding};
use tnf_core::realization::{k_decompose, mean_zero_check, realize_form, RealizationSchedule};
use tnf_core::series::SeriesJson;
use tnf_core::{Error, PeriodicSeries};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_REFUSED: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;

/// Default strip width when `--r` is omitted.
pub const DEFAULT_R: f64 = 0.5;
/// Default number of samples in `k` sample files.
pub const DEFAULT_SAMPLES: usize = 256;
/// Default number of homotopy times.
pub const DEFAULT_HOMOTOPY_TIMES: usize = 50;
/// Largest `k`-residual accepted when comparing against a reference.
pub const COMPARE_TOL: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "tnf", version, about = "Normal forms of near-standard totally real tori")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// L- and K-decompositions and norms of a series.
    Decompose(Opts),
    /// Volume normalization of the density 1 + b.
    Moser(Opts),
    /// Fibering normalization of the phase θ₁ + h.
    FiberNormalize(Opts),
    /// Realize the form (1 + a) dz₁∧…∧dz_n by an embedding.
    Realize(Opts),
    /// Invariant (ρ₀, k) of an embedding; compares with --in2 when given.
    Invariants(Opts),
    /// Non-critical homotopy between the curves --in and --in2.
    Homotopy(Opts),
    /// Schema and invariant diagnostics without computing.
    Validate(Opts),
}

#[derive(Args, Debug, Clone)]
pub struct Opts {
    /// Input file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Second input (homotopy target, or reference k for invariants).
    #[arg(long = "in2")]
    pub input2: Option<PathBuf>,
    /// Strip width r (r₀ for realize).
    #[arg(long = "r", visible_alias = "r0")]
    pub r: Option<f64>,
    /// Working degree.
    #[arg(long = "N")]
    pub degree: Option<usize>,
    /// Stop tolerance of iterative commands.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long = "max-iter")]
    pub max_iter: Option<usize>,
    /// Number of samples (k samples, or homotopy times).
    #[arg(long)]
    pub grid: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Accept k up to a half-turn when comparing invariants.
    #[arg(long = "allow-half-turn")]
    pub allow_half_turn: bool,
    /// Smallness constant of the initial hypothesis.
    #[arg(long)]
    pub eps: Option<f64>,
}

/// A failed run with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn schema(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_SCHEMA,
            message: format!("schema error: {}", msg.into()),
        }
    }

    fn internal(msg: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INTERNAL,
            message: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Hypothesis { .. } => EXIT_REFUSED,
            Error::DimensionMismatch { .. } | Error::InvalidInput(_) | Error::Json(_) => EXIT_SCHEMA,
            Error::Diverged { .. } | Error::Numerical { .. } => EXIT_INTERNAL,
        };
        let message = match &e {
            Error::Hypothesis { .. } => format!("refused: {e}"),
            _ => e.to_string(),
        };
        Failure { code, message }
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Runs one command; returns the exit code after printing any diagnostics.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Decompose(o) => checked(o).and_then(|_| decompose(o)),
        Command::Moser(o) => checked(o).and_then(|_| moser(o)),
        Command::FiberNormalize(o) => checked(o).and_then(|_| fiber_normalize(o)),
        Command::Realize(o) => checked(o).and_then(|_| realize(o)),
        Command::Invariants(o) => checked(o).and_then(|_| invariants(o)),
        Command::Homotopy(o) => checked(o).and_then(|_| homotopy(o)),
        Command::Validate(o) => validate(o),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{}", f.message);
            f.code
        }
    }
}

fn checked(o: &Opts) -> Outcome {
    if let Some(d) = o.degree {
        if d < 2 {
            return Err(Failure::schema(format!("--N {d}: the degree must be at least 2")));
        }
    }
    if let Some(t) = o.tol {
        if !(t > 0.0) {
            return Err(Failure::schema(format!("--tol {t}: must be positive")));
        }
    }
    if let Some(e) = o.eps {
        if !(e > 0.0) {
            return Err(Failure::schema(format!("--eps {e}: must be positive")));
        }
    }
    if o.grid == Some(0) {
        return Err(Failure::schema("--grid must be positive"));
    }
    fs::create_dir_all(&o.out).map_err(|e| Failure::internal(format!("cannot create {}: {e}", o.out.display())))
}

// ---------------------------------------------------------------------------
// I/O

fn read_text(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::schema(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> std::result::Result<T, Failure> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::schema(format!("{}: {e}", path.display())))
}

/// A float with 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".to_string()
    }
}

fn is_scalar(v: &Value) -> bool {
    !matches!(v, Value::Array(_) | Value::Object(_))
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    let inner = "  ".repeat(indent + 1);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => write!(out, "{i}").unwrap(),
            (_, Some(u)) => write!(out, "{u}").unwrap(),
            _ => out.push_str(&fmt_float(n.as_f64().unwrap_or(f64::NAN))),
        },
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string")),
        Value::Array(a) if a.is_empty() => out.push_str("[]"),
        Value::Array(a) if a.iter().all(is_scalar) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_value(x, 0, out);
            }
            out.push(']');
        }
        Value::Array(a) => {
            out.push_str("[\n");
            for (i, x) in a.iter().enumerate() {
                out.push_str(&inner);
                write_value(x, indent + 1, out);
                out.push_str(if i + 1 < a.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad);
            out.push(']');
        }
        Value::Object(m) if m.is_empty() => out.push_str("{}"),
        Value::Object(m) => {
            out.push_str("{\n");
            for (i, (k, x)) in m.iter().enumerate() {
                out.push_str(&inner);
                out.push_str(&serde_json::to_string(k).expect("key"));
                out.push_str(": ");
                write_value(x, indent + 1, out);
                out.push_str(if i + 1 < m.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad);
            out.push('}');
        }
    }
}

/// Pretty JSON with sorted keys and 17-digit floats.
pub fn to_json_string<T: Serialize>(v: &T) -> std::result::Result<String, Failure> {
    let value = serde_json::to_value(v).map_err(|e| Failure::internal(format!("serialization: {e}")))?;
    let mut out = String::new();
    write_value(&value, 0, &mut out);
    out.push('\n');
    Ok(out)
}

fn write_file(dir: &Path, name: &str, text: &str) -> Outcome {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Failure::internal(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Outcome {
    write_file(dir, name, &to_json_string(v)?)
}

/// `m,r_m,delta_m,b_m,B_m,residual` or `m,r_m,delta_m,a_m,residual`.
pub fn trace_csv(trace: &KamTrace) -> String {
    let mut s = String::new();
    match trace.kind {
        TraceKind::Fibering => {
            s.push_str("m,r_m,delta_m,b_m,B_m,residual\n");
            for r in &trace.records {
                let big_b = r.big_b.map_or_else(|| "null".to_string(), fmt_float);
                writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    r.m,
                    fmt_float(r.r_m),
                    fmt_float(r.delta_m),
                    fmt_float(r.size),
                    big_b,
                    fmt_float(r.residual)
                )
                .unwrap();
            }
        }
        TraceKind::Realization => {
            s.push_str("m,r_m,delta_m,a_m,residual\n");
            for r in &trace.records {
                writeln!(
                    s,
                    "{},{},{},{},{}",
                    r.m,
                    fmt_float(r.r_m),
                    fmt_float(r.delta_m),
                    fmt_float(r.size),
                    fmt_float(r.residual)
                )
                .unwrap();
            }
        }
    }
    s
}

/// `theta,k` at `m` equispaced points.
pub fn k_samples_csv(k: &PeriodicSeries, m: usize) -> String {
    let mut s = String::from("theta,k\n");
    for i in 0..m {
        let t = 2.0 * std::f64::consts::PI * i as f64 / m as f64;
        let v = k.eval_real_point(&[t]).map(|v| v.re).unwrap_or(f64::NAN);
        writeln!(s, "{},{}", fmt_float(t), fmt_float(v)).unwrap();
    }
    s
}

fn write_diverged_trace(dir: &Path, e: &Error) {
    if let Error::Diverged { trace: Some(t), .. } = e {
        let _ = write_file(dir, "trace.csv", &trace_csv(t));
    }
}

// ---------------------------------------------------------------------------
// Commands

fn decompose(o: &Opts) -> Outcome {
    let h: PeriodicSeries = read_json(&o.input)?;
    let r = o.r.unwrap_or(DEFAULT_R);
    let l = h.l_decompose();
    let k = k_decompose(&h);
    let mean = h.mean();
    let report = json!({
        "r": r,
        "norm": h.coeff_norm(r),
        "mean": [mean.re, mean.im],
        "real": h.is_real(),
        "l_norms": l.iter().map(|p| p.coeff_norm(r)).collect::<Vec<_>>(),
        "l_parts": l,
        "k_norms": k.iter().map(|p| p.coeff_norm(r)).collect::<Vec<_>>(),
        "k_parts": k,
        "obstruction": mean_zero_check(&h).defect,
    });
    write_json(&o.out, "decompose.json", &report)
}

fn moser(o: &Opts) -> Outcome {
    let b: PeriodicSeries = read_json(&o.input)?;
    let r = o.r.unwrap_or(DEFAULT_R);
    let density = VolumeDensity::new(b)?;
    let res = match o.degree {
        Some(d) => moser_normalize_with(&density, r, d)?,
        None => moser_normalize(&density, r)?,
    };
    let report = json!({
        "r": r,
        "mean": res.mean,
        "rho0": 1.0 + res.mean,
        "residual": res.residual,
        "f_norm": res.f_norm,
        "b_norm": res.b_norm,
        "f_bound_holds": res.f_norm <= 8.0 * std::f64::consts::PI * res.b_norm,
        "dropped": res.dropped,
    });
    write_json(&o.out, "moser.json", &report)?;
    write_json(&o.out, "map.json", &res.map)
}

fn fiber_normalize(o: &Opts) -> Outcome {
    let h: PeriodicSeries = read_json(&o.input)?;
    let mut schedule = KamSchedule::new(o.r.unwrap_or(DEFAULT_R));
    if let Some(t) = o.tol {
        schedule.stop_tol = t;
    }
    if let Some(m) = o.max_iter {
        schedule.max_iter = m;
    }
    if let Some(e) = o.eps {
        schedule.eps = e;
    }
    schedule.degree = o.degree;
    let res = fibering_normalize(&FiberingPhase::new(h)?, &schedule).map_err(|e| {
        write_diverged_trace(&o.out, &e);
        Failure::from(e)
    })?;
    let report = json!({
        "r0": schedule.r0,
        "steps": res.steps.len(),
        "shift": res.shift,
        "residual": res.residual,
        "det_residual": res.det_residual,
        "contraction_exponent": res.trace.contraction_exponent(1e-14),
        "warnings": res.trace.warnings,
    });
    write_json(&o.out, "k.json", &res.k)?;
    write_json(&o.out, "normalizer.json", &res.normalizer)?;
    write_json(&o.out, "fibering.json", &report)?;
    write_file(&o.out, "trace.csv", &trace_csv(&res.trace))?;
    write_file(&o.out, "k_samples.csv", &k_samples_csv(&res.k, o.grid.unwrap_or(DEFAULT_SAMPLES)))
}

fn realize(o: &Opts) -> Outcome {
    let a: PeriodicSeries = read_json(&o.input)?;
    let r0 = o.r.unwrap_or(DEFAULT_R);
    let mut schedule = RealizationSchedule::new(r0);
    if let Some(t) = o.tol {
        schedule.stop_tol = t;
    }
    if let Some(m) = o.max_iter {
        schedule.max_iter = m;
    }
    if let Some(e) = o.eps {
        schedule.eps = e;
    }
    schedule.degree = o.degree;
    let res = realize_form(&a, &schedule).map_err(|e| {
        write_diverged_trace(&o.out, &e);
        Failure::from(e)
    })?;
    let embedding = TorusEmbedding::from_annulus_map(&res.map, r0)?;
    let report = json!({
        "r0": r0,
        "steps": res.steps.len(),
        "det_residual": res.det_residual,
        "inverse_residual": res.inverse_residual,
        "phase_gradient_min": res.phase_gradient_min,
        "det_min": res.det_min,
        "injectivity_ratio": res.injectivity_ratio,
        "closeness": embedding.closeness(),
        "warnings": res.trace.warnings,
    });
    write_json(&o.out, "phi.json", &res.map)?;
    write_json(&o.out, "embedding.json", &embedding)?;
    write_json(&o.out, "realize.json", &report)?;
    write_file(&o.out, "trace.csv", &trace_csv(&res.trace))
}

fn invariants(o: &Opts) -> Outcome {
    let phi: TorusEmbedding = read_json(&o.input)?;
    let phi = TorusEmbedding::new(phi.components, phi.r0)?;
    let mut cfg = PipelineConfig::default();
    if let Some(t) = o.tol {
        cfg.fiber_stop_tol = t;
    }
    if let Some(m) = o.max_iter {
        cfg.max_iter = m;
    }
    if let Some(e) = o.eps {
        cfg.fiber_eps = e;
    }
    cfg.degree = o.degree;
    let rep = theorem_m_normalize_with(&phi, &cfg).map_err(|e| {
        write_diverged_trace(&o.out, &e);
        Failure::from(e)
    })?;
    write_json(&o.out, "invariants.json", &rep)?;
    write_json(&o.out, "k.json", &rep.k)?;
    write_file(&o.out, "trace.csv", &trace_csv(&rep.trace))?;
    write_file(&o.out, "k_samples.csv", &k_samples_csv(&rep.k, o.grid.unwrap_or(DEFAULT_SAMPLES)))?;
    if let Some(path) = &o.input2 {
        let reference: PeriodicSeries = read_json(path)?;
        let residual = k_uniqueness_residual(&reference, &rep.k, o.allow_half_turn)?;
        let ok = residual <= COMPARE_TOL;
        write_json(
            &o.out,
            "comparison.json",
            &json!({
                "residual": residual,
                "tolerance": COMPARE_TOL,
                "allow_half_turn": o.allow_half_turn,
                "match": ok,
            }),
        )?;
        if !ok {
            return Err(Failure::internal(format!(
                "k differs from the reference by {residual:.3e} > {COMPARE_TOL:.0e}"
            )));
        }
    }
    Ok(())
}

fn homotopy(o: &Opts) -> Outcome {
    let f0 = CurveImmersion::new(read_json(&o.input)?)?;
    let path2 = o
        .input2
        .as_ref()
        .ok_or_else(|| Failure::schema("homotopy needs --in2"))?;
    let f1 = CurveImmersion::new(read_json(path2)?)?;
    let h = WhitneyHomotopy::new(&f0, &f1)?;
    let count = o.grid.unwrap_or(DEFAULT_HOMOTOPY_TIMES).max(2);
    let mut csv = String::from("t,min_abs_mu_prime,noncritical,degree\n");
    let mut min_all = f64::INFINITY;
    let mut all_ok = true;
    for i in 0..count {
        let t = i as f64 / (count - 1) as f64;
        let ft = h.at(t)?;
        let rep = noncritical_phase(&ft);
        let d = gauss_degree(&ft)?;
        min_all = min_all.min(rep.min_abs);
        all_ok &= rep.noncritical && d == h.degree();
        writeln!(csv, "{},{},{},{}", fmt_float(t), fmt_float(rep.min_abs), rep.noncritical, d).unwrap();
    }
    let ends: Vec<Value> = [&f0, &f1]
        .iter()
        .map(|f| match embedding_check(f) {
            Ok(e) => json!({
                "is_embedding": e.is_embedding,
                "i_f": e.i_f,
                "degree": e.degree,
                "min_separation": e.min_separation,
                "grid_injective": e.grid_injective,
            }),
            Err(e) => json!({ "error": e.to_string() }),
        })
        .collect();
    write_file(&o.out, "homotopy.csv", &csv)?;
    write_json(
        &o.out,
        "homotopy.json",
        &json!({
            "degree": h.degree(),
            "times": count,
            "min_abs_mu_prime": min_all,
            "noncritical": all_ok,
            "endpoints": ends,
        }),
    )?;
    if all_ok {
        Ok(())
    } else {
        Err(Failure::internal("the homotopy left the non-critical class on the sample grid"))
    }
}

// ---------------------------------------------------------------------------
// validate

/// Result of [`validate_text`].
#[derive(Clone, Debug, Default)]
pub struct Validation {
    /// Schema and invariant violations; empty means well formed.
    pub problems: Vec<String>,
    /// Reality flags, degrees and mean conditions of each series.
    pub info: Vec<String>,
}

/// Diagnostics for a series, map, field, embedding or annulus-map file.
pub fn validate_text(text: &str) -> Validation {
    let mut out = Validation::default();
    let value: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            out.problems.push(format!("invalid JSON: {e}"));
            return out;
        }
    };
    let diags = &mut out;
    match &value {
        Value::Object(m) if m.contains_key("coeffs") => series_diagnostics("", &value, diags),
        Value::Object(m) => {
            let mut found = false;
            for key in ["components", "parts", "log_g"] {
                if let Some(Value::Array(items)) = m.get(key) {
                    found = true;
                    for (i, item) in items.iter().enumerate() {
                        series_diagnostics(&format!("{key}[{i}]: "), item, diags);
                    }
                }
            }
            if let Some(r0) = m.get("r0") {
                match r0.as_f64() {
                    Some(r) if r > 0.0 && r < 1.0 => {}
                    _ => diags.problems.push(format!("r0 = {r0}: need 0 < r0 < 1")),
                }
            }
            if !found {
                diags.problems.push("unrecognized document: expected a series or an object with components/parts/log_g".into());
            }
        }
        _ => diags.problems.push("expected a JSON object".into()),
    }
    out
}

fn series_diagnostics(prefix: &str, v: &Value, out: &mut Validation) {
    let diags = &mut out.problems;
    let j: SeriesJson = match serde_json::from_value(v.clone()) {
        Ok(j) => j,
        Err(e) => {
            diags.push(format!("{prefix}{e}"));
            return;
        }
    };
    if j.n == 0 {
        diags.push(format!("{prefix}n must be at least 1"));
        return;
    }
    let mut seen = std::collections::BTreeMap::new();
    let mut structural = false;
    for (i, t) in j.coeffs.iter().enumerate() {
        if t.k.len() != j.n {
            diags.push(format!("{prefix}coeffs[{i}]: index {:?} has length {}, expected n = {}", t.k, t.k.len(), j.n));
            structural = true;
            continue;
        }
        if t.k.iter().any(|x| x.unsigned_abs() as usize > j.degree) {
            diags.push(format!("{prefix}coeffs[{i}]: index {:?} exceeds N = {}", t.k, j.degree));
            structural = true;
        }
        if let Some(first) = seen.insert(t.k.clone(), i) {
            diags.push(format!("{prefix}duplicate key {:?} at coeffs[{first}] and coeffs[{i}]", t.k));
            structural = true;
        }
        if !(t.re.is_finite() && t.im.is_finite()) {
            diags.push(format!("{prefix}coeffs[{i}]: non-finite coefficient"));
            structural = true;
        }
    }
    if structural {
        return;
    }
    let terms: Vec<(Vec<i32>, tnf_core::Complex64)> = j
        .coeffs
        .iter()
        .map(|t| (t.k.clone(), tnf_core::Complex64::new(t.re, t.im)))
        .collect();
    let s = match PeriodicSeries::from_terms(j.n, j.degree, &terms) {
        Ok(s) => s,
        Err(e) => {
            diags.push(format!("{prefix}{e}"));
            return;
        }
    };
    if j.real {
        for (k, kk, d) in s.reality_violations(tnf_core::series::COEFF_TOL) {
            diags.push(format!(
                "{prefix}real flag violated: c_{:?} and c_{:?} are not conjugate (defect {d:.3e})",
                k.0, kk.0
            ));
        }
    }
    let mean = s.mean();
    let axis_means: Vec<String> = (0..j.n)
        .map(|a| format!("{:.3e}", s.average(&[a]).map(|x| x.coeff_norm(0.0)).unwrap_or(f64::NAN)))
        .collect();
    out.info.push(format!(
        "{prefix}n = {}, N = {}, real = {}, reality defect {:.3e}, mean {:.3e}{:+.3e}i, |a_(-1,…,-1)| = {:.3e}, axis averages [{}]",
        j.n,
        j.degree,
        j.real,
        s.reality_defect(),
        mean.re,
        mean.im,
        mean_zero_check(&s).defect,
        axis_means.join(", ")
    ));
}

fn validate(o: &Opts) -> Outcome {
    let text = read_text(&o.input)?;
    let v = validate_text(&text);
    if v.problems.is_empty() {
        println!("ok");
        for line in &v.info {
            println!("{line}");
        }
        Ok(())
    } else {
        for d in &v.problems {
            println!("{d}");
        }
        Err(Failure {
            code: EXIT_SCHEMA,
            message: format!("{}: {} problem(s)", o.input.display(), v.problems.len()),
        })
    }
}
