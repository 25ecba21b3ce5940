//! KAM normalization of a fibering phase `μ(θ) = θ₁ + h(θ)` to `θ₁ + k(θ₁)`
//! by volume-preserving maps.
//!
//! Each step removes the part of `h` that depends on `θ₂,…,θ_n` to first order,
//! using the time-(−1) flow of a divergence-free field, on a shrinking strip.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_strip, Bound, Error, Result};
use crate::flows::{self, compose_maps, det_complex, FlowOptions, MapEvaluator, PeriodicVectorField, TorusMapLift};
use crate::grid::Grid;
use crate::series::{PeriodicSeries, COEFF_TOL};

/// Default smallness constant in `‖h − L₀h − L₁h‖_{r₀} ≤ ε r₀³`.
pub const DEFAULT_EPS: f64 = 1e-3;
/// Default stop tolerance on `b_m`.
pub const DEFAULT_STOP_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 20;
/// Default working degree as a multiple of the input degree.
pub const DEGREE_FACTOR: usize = 3;
/// Safety factor applied to the fitted constants in hypothesis checks.
pub const SAFETY: f64 = 2.0;
/// Largest divergence tolerated for a field flagged divergence-free.
pub const DIVERGENCE_TOL: f64 = 1e-10;

/// Constants of the one-step estimates, fitted on random admissible inputs
/// (see the calibration tests) and frozen here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamConstants {
    /// Field bound `‖p‖_r ≤ c₂ n b_r/(rδ)`; the step hypothesis
    /// `b_r ≤ r²δ²/(n c₂)` then gives `‖p‖_r ≤ rδ` for the flow.
    pub c2: f64,
    /// Contraction `b̃ ≤ c₄ b²/(r³δ³)`.
    pub c4: f64,
}

impl KamConstants {
    pub const FITTED: KamConstants = KamConstants { c2: 0.05, c4: 1e-4 };

    /// `c₆ = max(n c₂, 27 c₄)`, the constant of the convergence regime
    /// `b_m ≤ r_m³ δ_m³ / c₆`.
    pub fn c6(&self, n: usize) -> f64 {
        (n as f64 * self.c2).max(27.0 * self.c4)
    }
}

impl Default for KamConstants {
    fn default() -> Self {
        Self::FITTED
    }
}

/// `μ(θ) = θ₁ + h(θ)` with `h` real on `ℝⁿ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiberingPhase {
    h: PeriodicSeries,
}

impl FiberingPhase {
    pub fn new(h: PeriodicSeries) -> Result<Self> {
        if !h.is_real() {
            return Err(Error::InvalidInput("phase perturbation must be real on ℝⁿ".into()));
        }
        Ok(FiberingPhase { h })
    }

    pub fn h(&self) -> &PeriodicSeries {
        &self.h
    }

    pub fn into_series(self) -> PeriodicSeries {
        self.h
    }

    /// `(B_r, b_r)`: `B = max{|L₀h|, ‖D₁L₁h‖_r}`, `b = max_{j≥2} ‖L_jh‖_r`.
    pub fn sizes(&self, r: f64) -> (f64, f64) {
        let l = self.h.l_decompose();
        let big_b = l[0].mean().norm().max(l[1].derivative(0).coeff_norm(r));
        let b = l[2..].iter().map(|x| x.coeff_norm(r)).fold(0.0, f64::max);
        (big_b, b)
    }

    /// `h − L₀h − L₁h`, the part that still depends on `θ₂,…,θ_n`.
    pub fn non_normal(&self) -> PeriodicSeries {
        &self.h - &self.h.l_partial_sum(1)
    }
}

/// Shrinking-strip schedule `r_m = ½(1 + 1/(m+1)) r₀`, `δ_m = 1/(4(m+2)²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KamSchedule {
    pub r0: f64,
    pub max_iter: usize,
    pub stop_tol: f64,
    /// Smallness constant of the initial hypothesis.
    pub eps: f64,
    /// Working degree; defaults to `3N`.
    pub degree: Option<usize>,
    pub constants: KamConstants,
}

impl KamSchedule {
    pub fn new(r0: f64) -> Self {
        KamSchedule {
            r0,
            max_iter: DEFAULT_MAX_ITER,
            stop_tol: DEFAULT_STOP_TOL,
            eps: DEFAULT_EPS,
            degree: None,
            constants: KamConstants::FITTED,
        }
    }

    pub fn r(&self, m: usize) -> f64 {
        0.5 * (1.0 + 1.0 / (m as f64 + 1.0)) * self.r0
    }

    pub fn delta(&self, m: usize) -> f64 {
        1.0 / (4.0 * (m as f64 + 2.0).powi(2))
    }
}

/// One iteration of a KAM loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamRecord {
    pub m: usize,
    pub r_m: f64,
    pub delta_m: f64,
    /// `b_m` for the fibering loop, `a_m = ‖a_m‖_{r_m}` for the realization loop.
    pub size: f64,
    /// `B_m` (fibering loop only).
    pub big_b: Option<f64>,
    /// `size_m r_{m−1}^p δ_{m−1}^q / size_{m−1}²`, the measured one-step constant.
    pub contraction: Option<f64>,
    /// Grid sup of the quantity being driven to zero.
    pub residual: f64,
    /// Whether the convergence-regime inequality held at this iteration.
    pub in_regime: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceKind {
    Fibering,
    Realization,
}

/// Per-iteration records of a KAM run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamTrace {
    pub kind: TraceKind,
    pub records: Vec<KamRecord>,
    pub warnings: Vec<String>,
}

impl KamTrace {
    pub fn new(kind: TraceKind) -> Self {
        KamTrace {
            kind,
            records: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub(crate) fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    /// Least-squares slope of `log size_{m+1}` against `log size_m` over the
    /// records above `floor`.
    pub fn contraction_exponent(&self, floor: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .records
            .windows(2)
            .filter(|w| w[0].size > floor && w[1].size > floor)
            .map(|w| (w[0].size.ln(), w[1].size.ln()))
            .collect();
        if pts.is_empty() {
            return None;
        }
        if pts.len() == 1 {
            return Some(pts[0].1 / pts[0].0);
        }
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    }
}

/// Output of [`fibering_step`].
#[derive(Clone, Debug)]
pub struct FiberingStep {
    /// Time-(−1) flow of `field`.
    pub map: TorusMapLift,
    pub field: PeriodicVectorField,
    /// `h̃` with `θ₁ + h̃(θ) = θ₁′ + h(θ′)`, `θ′ = φ̃(θ)`.
    pub k_next: FiberingPhase,
    pub big_b: f64,
    pub b: f64,
    pub flow_defect: f64,
    pub dropped: f64,
}

/// One step at the working degree of `h`, with the fitted constants.
pub fn fibering_step(h: &FiberingPhase, r: f64, delta: f64) -> Result<FiberingStep> {
    fibering_step_with(h, r, delta, &KamConstants::FITTED)
}

pub fn fibering_step_with(
    phase: &FiberingPhase,
    r: f64,
    delta: f64,
    constants: &KamConstants,
) -> Result<FiberingStep> {
    check_strip(r)?;
    if !(delta > 0.0 && delta < 0.25) {
        return Err(Error::hypothesis(Bound::DeltaRange, format!("δ = {delta}, need 0 < δ < 1/4")));
    }
    let h = phase.h();
    let n = h.dim();
    let degree = h.degree();
    let (big_b, b) = phase.sizes(r);
    if big_b > 0.5 {
        return Err(Error::hypothesis(Bound::P4, format!("B_r = {big_b:.6e} > 1/2")));
    }
    let b_max = r * r * delta * delta / (SAFETY * n as f64 * constants.c2);
    if b > b_max {
        return Err(Error::hypothesis(
            Bound::B,
            format!("b_r = {b:.6e} > r²δ²/(2nc₂) = {b_max:.6e}"),
        ));
    }
    if b == 0.0 {
        return Ok(FiberingStep {
            map: TorusMapLift::identity(n, degree),
            field: PeriodicVectorField::zeros(n, degree),
            k_next: phase.clone(),
            big_b,
            b,
            flow_defect: 0.0,
            dropped: 0.0,
        });
    }

    let l = h.l_decompose();
    let den = &PeriodicSeries::constant(n, degree, Complex64::new(1.0, 0.0)) + &l[1].derivative(0);
    let mut p1 = PeriodicSeries::zeros(n, degree);
    let mut comps = vec![PeriodicSeries::zeros(n, degree); n];
    let mut dropped = 0.0;
    for j in 2..=n {
        if l[j].is_zero() {
            continue;
        }
        let q = if l[1].is_zero() {
            l[j].clone()
        } else {
            let (q, d) = PeriodicSeries::quotient(&l[j], &den, degree)?;
            dropped += d;
            // dividing by a function of θ₁ keeps the L_j support
            q.filter(|k| k[j - 1] != 0 && k[j..].iter().all(|&x| x == 0))
        };
        p1 = &p1 + &q;
        comps[j - 1] = -&q.derivative(0).antiderivative(j - 1)?;
    }
    comps[0] = p1;
    let field = PeriodicVectorField::new(comps)?;
    let div = field.divergence().coeff_norm(0.0);
    if div > DIVERGENCE_TOL {
        return Err(Error::numerical("fibering_step", format!("field divergence {div:.3e}")));
    }
    let fl = flows::flow_with(&field, -1.0, r, delta, None, &FlowOptions::default())?;
    dropped += fl.dropped;
    let comp = h.compose(&fl.map, degree)?;
    dropped += comp.dropped;
    let k_next = (&fl.map.parts()[0] + &comp.series).real_part();
    Ok(FiberingStep {
        map: fl.map,
        field,
        k_next: FiberingPhase::new(k_next)?,
        big_b,
        b,
        flow_defect: fl.defect,
        dropped,
    })
}

/// Output of [`fibering_normalize`].
#[derive(Clone, Debug)]
pub struct FiberingResult {
    /// `Φ = φ₀∘…∘φ_M∘L_{−c}` re-expanded at the working degree.
    pub normalizer: TorusMapLift,
    /// The individual step maps `φ₀, …, φ_M`.
    pub steps: Vec<TorusMapLift>,
    /// The final translation `c` (so `Φ` ends with `θ₁ ↦ θ₁ − c`).
    pub shift: f64,
    /// `k(θ₁)` as a one-variable series with `[k] = 0`.
    pub k: PeriodicSeries,
    pub trace: KamTrace,
    /// `sup |μ(Φ̃(θ)) − θ₁ − k(θ₁)|` on a real grid, evaluating the step chain.
    pub residual: f64,
    /// `sup |det DΦ − 1|` on the same grid.
    pub det_residual: f64,
}

/// Restricts a series depending on `θ₁` only to a one-variable series.
pub fn first_axis_part(h: &PeriodicSeries) -> PeriodicSeries {
    let n = h.dim();
    let d = h.degree();
    let mut out = PeriodicSeries::zeros(1, d);
    let mut k = vec![0i32; n];
    for k1 in -(d as i32)..=(d as i32) {
        k[0] = k1;
        out.set_coeff(&[k1], h.coeff(&k));
    }
    if h.is_real() {
        out.into_real().expect("restriction of a real series is real")
    } else {
        out.into_complex()
    }
}

/// `k(θ₁)` viewed as a function on `Tⁿ`.
pub fn lift_first_axis(k: &PeriodicSeries, n: usize) -> PeriodicSeries {
    let d = k.degree();
    let mut out = PeriodicSeries::zeros(n, d);
    let mut idx = vec![0i32; n];
    for k1 in -(d as i32)..=(d as i32) {
        idx[0] = k1;
        out.set_coeff(&idx, k.coeff(&[k1]));
    }
    if k.is_real() {
        out.into_real().expect("lift of a real series is real")
    } else {
        out.into_complex()
    }
}

/// Runs the fibering KAM loop on `μ = θ₁ + h`.
pub fn fibering_normalize(phase: &FiberingPhase, schedule: &KamSchedule) -> Result<FiberingResult> {
    let h0 = phase.h();
    let n = h0.dim();
    check_strip(schedule.r0)?;
    let degree = schedule
        .degree
        .unwrap_or(DEGREE_FACTOR * h0.degree().max(1))
        .max(h0.degree());
    let consts = schedule.constants;
    let r0 = schedule.r0;
    let nn = phase.non_normal().coeff_norm(r0);
    let limit = schedule.eps * r0.powi(3);
    if nn > limit {
        return Err(Error::hypothesis(
            Bound::Smallh,
            format!("‖h − L₀h − L₁h‖_r₀ = {nn:.6e} > εr₀³ = {limit:.6e} (ε = {:.1e})", schedule.eps),
        ));
    }
    let (big_b0, _) = phase.sizes(r0);
    if big_b0 > 0.25 {
        return Err(Error::hypothesis(Bound::P4, format!("B_r₀ = {big_b0:.6e} > 1/4 at the start")));
    }

    let mut current = FiberingPhase::new(h0.widened(degree))?;
    let mut trace = KamTrace::new(TraceKind::Fibering);
    let mut steps: Vec<TorusMapLift> = Vec::new();
    let mut prev: Option<(f64, f64, f64)> = None; // (b, r, δ) of the previous step
    let mut regime_reported = false;
    let mut m = 0;
    loop {
        let r = schedule.r(m);
        let delta = schedule.delta(m);
        let (big_b, b) = current.sizes(r);
        let residual = current.non_normal().real_sup(2 * degree + 1);
        let contraction = prev.map(|(pb, pr, pd)| b * (pr * pd).powi(3) / (pb * pb));
        let in_regime = b <= (r * delta).powi(3) / consts.c6(n);
        if !in_regime && !regime_reported && b > schedule.stop_tol {
            regime_reported = true;
            trace.warn(format!(
                "iteration {m}: b_m = {b:.3e} above r_m³δ_m³/c₆ = {:.3e}; outside the quadratic regime",
                (r * delta).powi(3) / consts.c6(n)
            ));
        }
        trace.records.push(KamRecord {
            m,
            r_m: r,
            delta_m: delta,
            size: b,
            big_b: Some(big_b),
            contraction,
            residual,
            in_regime,
        });
        if b <= schedule.stop_tol {
            break;
        }
        if m >= schedule.max_iter {
            return Err(Error::Diverged {
                stage: "fibering_normalize",
                detail: format!("b_m = {b:.3e} after {m} iterations (stop_tol {:.1e})", schedule.stop_tol),
                trace: Some(Box::new(trace)),
            });
        }
        let step = match fibering_step_with(&current, r, delta, &consts) {
            Ok(s) => s,
            Err(e) => {
                let detail = format!("iteration {m}: {e}");
                return Err(match e {
                    Error::Hypothesis { bound, .. } => Error::Hypothesis { bound, detail },
                    _ => Error::Diverged {
                        stage: "fibering_normalize",
                        detail,
                        trace: Some(Box::new(trace)),
                    },
                });
            }
        };
        steps.push(step.map);
        current = step.k_next;
        prev = Some((b, r, delta));
        m += 1;
    }

    let normal = current.h().l_partial_sum(1);
    let shift = normal.mean().re;
    let kappa = first_axis_part(&(&normal - &PeriodicSeries::constant(n, degree, Complex64::new(shift, 0.0))));
    let k = kappa.translate(&[-shift]).into_real()?;

    let mut shift_vec = vec![0.0; n];
    shift_vec[0] = -shift;
    let translation = TorusMapLift::translation(&shift_vec, degree);
    let mut chain = steps.clone();
    chain.push(translation);
    let normalizer = chain
        .iter()
        .skip(1)
        .try_fold(chain[0].clone(), |acc, m| compose_maps(&acc, m, degree))?;
    let (residual, det_residual) = chain_residuals(h0, &k, &chain)?;
    Ok(FiberingResult {
        normalizer,
        steps,
        shift,
        k,
        trace,
        residual,
        det_residual,
    })
}

/// Evaluates `μ∘Φ̃ − θ₁ − k(θ₁)` and `det DΦ − 1` on a real grid, applying the
/// chain `maps[0]∘maps[1]∘…` pointwise.
pub(crate) fn chain_residuals(h: &PeriodicSeries, k: &PeriodicSeries, maps: &[TorusMapLift]) -> Result<(f64, f64)> {
    let n = h.dim();
    let degree = maps.iter().map(|m| m.degree()).max().unwrap_or(0).max(h.degree());
    let grid = verification_grid(n, degree);
    let mut evals: Vec<MapEvaluator> = maps.iter().map(MapEvaluator::new).collect();
    let hm = TorusMapLift::from_parts(
        std::iter::once(h.clone())
            .chain((1..n).map(|_| PeriodicSeries::zeros(n, h.degree())))
            .collect(),
    )?;
    let mut hev = MapEvaluator::new(&hm);
    let kev_map = TorusMapLift::from_parts(vec![k.clone()])?;
    let mut kev = MapEvaluator::new(&kev_map);
    let mut res: f64 = 0.0;
    let mut det_res: f64 = 0.0;
    let mut pt = vec![0.0; n];
    for idx in 0..grid.len() {
        grid.point_into(idx, &mut pt);
        let mut z: Vec<Complex64> = pt.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let mut det = Complex64::new(1.0, 0.0);
        for ev in evals.iter_mut().rev() {
            det *= det_complex(ev.jacobian(&z));
            z = ev.value(&z);
        }
        // μ(θ′) = θ′₁ + h(θ′); hev returns θ′₁ + h(θ′) in its first slot
        let mu = hev.value(&z)[0];
        let kk = kev.value(&[Complex64::new(pt[0], 0.0)])[0] - pt[0];
        res = res.max((mu - pt[0] - kk).norm());
        det_res = det_res.max((det - 1.0).norm());
    }
    Ok((res, det_res))
}

/// Real verification grid with at most about 4096 points.
pub(crate) fn verification_grid(n: usize, degree: usize) -> Grid {
    let cap = (4096f64.powf(1.0 / n as f64)).floor() as usize;
    Grid::new(n, (2 * degree + 3).min(cap).max(8))
}

/// `min_s sup_θ |k̂(θ + s) − k(θ)|` over `s ∈ {0}` or `{0, π}`.
pub fn k_uniqueness_residual(k: &PeriodicSeries, k_hat: &PeriodicSeries, allow_half_turn: bool) -> Result<f64> {
    check_dim(1, k.dim())?;
    check_dim(1, k_hat.dim())?;
    for (name, s) in [("k", k), ("k̂", k_hat)] {
        let m = s.mean().norm();
        if m > COEFF_TOL {
            return Err(Error::hypothesis(Bound::I2, format!("[{name}] = {m:.3e} ≠ 0")));
        }
    }
    let grid = Grid::new(1, 512);
    let base = grid.sample(k);
    let shifts: &[f64] = if allow_half_turn { &[0.0, PI] } else { &[0.0] };
    Ok(shifts
        .iter()
        .map(|&s| {
            grid.sample(&k_hat.translate(&[s]))
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min))
}
