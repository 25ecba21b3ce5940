//! Realizing a complex n-form `(1 + a(z)) Ω` on the torus as `φ*Ω`.
//!
//! Annulus functions are series in `θ` with `z_j = e^{iθ_j}`, so the Laurent
//! exponent of `z_j` is the Fourier index `k_j`. Each step solves the
//! linearized equation `Σ ∂_j q_j = a` and pulls the form back by the
//! time-(−1) flow of `v = Σ q_j ∂/∂z_j`; the new density `â` is quadratic in
//! `a`. The realizing map is the inverse of the composed flows.

use std::f64::consts::{E, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_strip, Bound, Error, Result};
use crate::fibering::{KamRecord, KamTrace, TraceKind};
use crate::flows::{self, det_complex, probe_points, FlowOptions, MapEvaluator, PeriodicVectorField, TorusMapLift};
use crate::grid::Grid;
use crate::series::{PeriodicSeries, PointEvaluator, COEFF_TOL};

/// Laurent data on an annulus, stored as a series in `θ`.
pub type AnnulusFunction = PeriodicSeries;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Default smallness constant in `‖a‖_{r₀} ≤ ε r₀`.
pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_STOP_TOL: f64 = 1e-13;
pub const DEFAULT_MAX_ITER: usize = 20;
/// Default working degree is `max(3N, MIN_DEGREE)`.
pub const DEGREE_FACTOR: usize = 3;
pub const MIN_DEGREE: usize = 8;

/// Fitted constant of `‖â‖_{(1−2δ)r} ≤ c₇ ‖a‖_r²/(rδ)`.
pub const C7: f64 = 1e-2;

/// `c₈ = max(c₇, 4e^{n+2}π)`, the constant of the regime `a_m ≤ r_m δ_m²/c₈`.
pub fn c8(n: usize) -> f64 {
    C7.max(4.0 * E.powi(n as i32 + 2) * PI)
}

/// `v = Σ q_j ∂/∂z_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct HoloVectorField {
    q: Vec<PeriodicSeries>,
}

impl HoloVectorField {
    pub fn components(&self) -> &[PeriodicSeries] {
        &self.q
    }

    /// `Σ_j ∂q_j/∂z_j` as Laurent data.
    pub fn divergence(&self) -> PeriodicSeries {
        let n = self.q.len();
        let degree = self.q[0].degree() + 1;
        let mut out = PeriodicSeries::zeros(n, degree).into_complex();
        for (j, qj) in self.q.iter().enumerate() {
            for (k, c) in qj.terms() {
                // ∂_j z^k = k_j z^{k − e_j}
                if k.0[j] == 0 {
                    continue;
                }
                let mut kk = k.0.clone();
                kk[j] -= 1;
                let prev = out.coeff(&kk);
                out.set_coeff(&kk, prev + c * k.0[j] as f64);
            }
        }
        out
    }

    /// The same field in `θ` coordinates: `p_j(θ) = −i e^{−iθ_j} q_j`.
    pub fn conjugated(&self) -> Result<PeriodicVectorField> {
        let n = self.q.len();
        let degree = self.q[0].degree() + 1;
        let comps = self
            .q
            .iter()
            .enumerate()
            .map(|(j, qj)| {
                let mut p = PeriodicSeries::zeros(n, degree).into_complex();
                for (k, c) in qj.terms() {
                    let mut kk = k.0.clone();
                    kk[j] -= 1;
                    p.set_coeff(&kk, -I * c);
                }
                p
            })
            .collect();
        PeriodicVectorField::new(comps)
    }
}

/// `z′_j = z_j g_j(z)`, stored through `log g_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnulusMap {
    pub log_g: Vec<PeriodicSeries>,
}

impl AnnulusMap {
    pub fn identity(n: usize, degree: usize) -> Self {
        AnnulusMap {
            log_g: vec![PeriodicSeries::zeros(n, degree).into_complex(); n],
        }
    }

    /// From `θ ↦ θ + f(θ)`: `log g_j = i f_j`.
    pub fn from_torus_map(map: &TorusMapLift) -> Result<Self> {
        if !map.has_identity_matrix() {
            return Err(Error::InvalidInput("annulus maps need an identity integer part".into()));
        }
        Ok(AnnulusMap {
            log_g: map.parts().iter().map(|f| f.scale(I)).collect(),
        })
    }

    /// `θ ↦ θ + f(θ)` with `f_j = −i log g_j`.
    pub fn to_torus_map(&self) -> Result<TorusMapLift> {
        TorusMapLift::from_parts(self.log_g.iter().map(|l| l.scale(-I)).collect())
    }

    pub fn dim(&self) -> usize {
        self.log_g.len()
    }

    /// The image of `z = e^{iθ}` for complex `θ`.
    pub fn eval_theta(&self, theta: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim();
        let degree = self.log_g.iter().map(|l| l.degree()).max().unwrap_or(0);
        let mut ev = PointEvaluator::new(n, degree);
        ev.set_point(theta);
        theta
            .iter()
            .zip(&self.log_g)
            .map(|(t, l)| (I * t + ev.eval(l)).exp())
            .collect()
    }

    /// `max_j ‖log g_j‖_r`.
    pub fn log_norm(&self, r: f64) -> f64 {
        self.log_g.iter().map(|l| l.coeff_norm(r)).fold(0.0, f64::max)
    }
}

/// `[K₁a, …, K_na, K_{n+1}a]`: `K_ja` collects the terms with exponents
/// `i₁ = … = i_{j−1} = −1` and `i_j ≠ −1`; `K_{n+1}a` is the single monomial
/// `a_{−1,…,−1}/(z₁⋯z_n)`.
pub fn k_decompose(a: &AnnulusFunction) -> Vec<AnnulusFunction> {
    let n = a.dim();
    (1..=n + 1)
        .map(|j| {
            a.filter(|k| {
                if j == n + 1 {
                    k.iter().all(|&x| x == -1)
                } else {
                    k[..j - 1].iter().all(|&x| x == -1) && k[j - 1] != -1
                }
            })
        })
        .collect()
}

/// Result of [`mean_zero_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanCheck {
    pub ok: bool,
    /// `|a_{−1,…,−1}|`.
    pub defect: f64,
}

/// Whether the obstruction coefficient `a_{−1,…,−1}` vanishes.
pub fn mean_zero_check(a: &AnnulusFunction) -> MeanCheck {
    let defect = a.coeff(&vec![-1; a.dim()]).norm();
    MeanCheck {
        ok: defect <= COEFF_TOL,
        defect,
    }
}

fn require_mean_zero(a: &AnnulusFunction) -> Result<()> {
    let mc = mean_zero_check(a);
    if mc.ok {
        Ok(())
    } else {
        Err(Error::hypothesis(
            Bound::Kn,
            format!("a_{{−1,…,−1}} has modulus {:.6e}", mc.defect),
        ))
    }
}

/// Solves `Σ ∂_j q_j = a` with `q_j = i D_j⁻¹(z_j K_ja)`, the unique solution
/// without monomials of exponent `i_j = 0` in `q_j`.
pub fn build_divergence_vector_field(a: &AnnulusFunction) -> Result<HoloVectorField> {
    require_mean_zero(a)?;
    let n = a.dim();
    let degree = a.degree() + 1;
    let parts = k_decompose(a);
    let q = (0..n)
        .map(|j| {
            let mut qj = PeriodicSeries::zeros(n, degree).into_complex();
            for (k, c) in parts[j].terms() {
                let mut kk = k.0.clone();
                kk[j] += 1;
                qj.set_coeff(&kk, c / kk[j] as f64);
            }
            qj
        })
        .collect();
    Ok(HoloVectorField { q })
}

/// Output of [`realization_step`].
#[derive(Clone, Debug)]
pub struct RealizationStep {
    pub map: AnnulusMap,
    pub a_hat: AnnulusFunction,
    pub field: HoloVectorField,
    /// `log det D_zψ` from integrating `a` along the flow.
    pub log_det: PeriodicSeries,
    /// `max |(1 + a∘ψ) det Dψ − (1 + â)|` on a verification grid, with
    /// `det Dψ = e^{iΣf_j} det(I + D_θ f)` computed independently.
    pub residual: f64,
    pub flow_defect: f64,
    pub dropped: f64,
}

/// One step with working degree `max(3N, 8)`.
pub fn realization_step(a: &AnnulusFunction, r: f64, delta: f64) -> Result<RealizationStep> {
    realization_step_with(a, r, delta, default_degree(a))
}

fn default_degree(a: &AnnulusFunction) -> usize {
    (DEGREE_FACTOR * a.degree()).max(MIN_DEGREE)
}

pub fn realization_step_with(a: &AnnulusFunction, r: f64, delta: f64, degree: usize) -> Result<RealizationStep> {
    check_strip(r)?;
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::hypothesis(Bound::DeltaRange, format!("δ = {delta}, need 0 < δ < 1/2")));
    }
    let n = a.dim();
    let field = build_divergence_vector_field(a)?;
    let p = field.conjugated()?;
    let pn = p.norm(r);
    if pn > r * delta {
        return Err(Error::hypothesis(
            Bound::F4,
            format!("‖p‖_r = {pn:.6e} > rδ = {:.6e}", r * delta),
        ));
    }
    let degree = degree.max(a.degree() + 1);
    if a.is_zero() {
        return Ok(RealizationStep {
            map: AnnulusMap::identity(n, degree),
            a_hat: PeriodicSeries::zeros(n, degree).into_complex(),
            field,
            log_det: PeriodicSeries::zeros(n, degree).into_complex(),
            residual: 0.0,
            flow_defect: 0.0,
            dropped: 0.0,
        });
    }
    let opts = FlowOptions {
        degree: Some(degree),
        ..FlowOptions::default()
    };
    let a_wide = a.widened(degree);
    let fl = flows::flow_with(&p, -1.0, r, delta, Some(&a_wide), &opts)?;
    let log_det = fl.integral.clone().expect("integrand supplied");
    let mut dropped = fl.dropped;
    let pulled = a_wide.compose(&fl.map, degree)?;
    dropped += pulled.dropped;
    let (a_hat, d) = PeriodicSeries::map_pointwise(&[&pulled.series, &log_det], degree, false, |v| {
        (ONE + v[0]) * v[1].exp() - ONE
    })?;
    dropped += d;
    let residual = step_residual(&a_wide, &fl.map, &a_hat);
    Ok(RealizationStep {
        map: AnnulusMap::from_torus_map(&fl.map)?,
        a_hat,
        field,
        log_det,
        residual,
        flow_defect: fl.defect,
        dropped,
    })
}

/// `det D_zψ` for `ψ: θ ↦ θ + f(θ)` in annulus coordinates.
fn det_z(ev: &mut MapEvaluator, theta: &[Complex64]) -> Complex64 {
    let img = ev.value(theta);
    let shift: Complex64 = img.iter().zip(theta).map(|(a, b)| a - b).sum();
    (I * shift).exp() * det_complex(ev.jacobian(theta))
}

fn step_residual(a: &PeriodicSeries, map: &TorusMapLift, a_hat: &PeriodicSeries) -> f64 {
    let n = a.dim();
    let mut mev = MapEvaluator::new(map);
    let mut ev = PointEvaluator::new(n, a.degree().max(a_hat.degree()));
    probe_points(n, 24)
        .iter()
        .map(|p| {
            let z: Vec<Complex64> = p.iter().map(|&x| Complex64::new(x, 0.0)).collect();
            let det = det_z(&mut mev, &z);
            let img = mev.value(&z);
            ev.set_point(&img);
            let lhs = (ONE + ev.eval(a)) * det;
            ev.set_point(&z);
            (lhs - ONE - ev.eval(a_hat)).norm()
        })
        .fold(0.0, f64::max)
}

/// Schedule `r_{m+1} = (1 − 2δ_m) r_m`, `δ_m = e^{−2}/(2n(m+2)²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizationSchedule {
    pub r0: f64,
    pub max_iter: usize,
    pub stop_tol: f64,
    pub eps: f64,
    /// Working degree; defaults to `max(3N, 8)`.
    pub degree: Option<usize>,
}

impl RealizationSchedule {
    pub fn new(r0: f64) -> Self {
        RealizationSchedule {
            r0,
            max_iter: DEFAULT_MAX_ITER,
            stop_tol: DEFAULT_STOP_TOL,
            eps: DEFAULT_EPS,
            degree: None,
        }
    }

    pub fn delta(&self, n: usize, m: usize) -> f64 {
        (-2.0f64).exp() / (2.0 * n as f64 * (m as f64 + 2.0).powi(2))
    }

    pub fn r(&self, n: usize, m: usize) -> f64 {
        (0..m).fold(self.r0, |r, i| r * (1.0 - 2.0 * self.delta(n, i)))
    }
}

/// Output of [`realize_form`].
#[derive(Clone, Debug)]
pub struct Realization {
    /// The realizing embedding `φ` with `φ*Ω = (1 + a)Ω`.
    pub map: AnnulusMap,
    /// The step maps `ψ₀, …, ψ_M` whose composite inverts `φ`.
    pub steps: Vec<AnnulusMap>,
    pub trace: KamTrace,
    /// `sup |det Dφ − (1 + a)|` on the real torus.
    pub det_residual: f64,
    /// `sup |Ψ(φ(z)) − z|` over points of `A_{r₀/8}`.
    pub inverse_residual: f64,
    /// `min |∇μ|` for the phase `μ` of `φ*Ω`; positive means non-critical.
    pub phase_gradient_min: f64,
    /// `min |det Dφ|` on the grid; positive means totally real.
    pub det_min: f64,
    /// `min |φ(z) − φ(w)| / |z − w|` over pairs of grid points.
    pub injectivity_ratio: f64,
}

/// Runs the realization iteration and inverts the composed flows.
pub fn realize_form(a: &AnnulusFunction, schedule: &RealizationSchedule) -> Result<Realization> {
    let n = a.dim();
    let r0 = schedule.r0;
    check_strip(r0)?;
    require_mean_zero(a)?;
    let an = a.coeff_norm(r0);
    if an > schedule.eps * r0 {
        return Err(Error::hypothesis(
            Bound::FormSmall,
            format!("‖a‖_r₀ = {an:.6e} > εr₀ = {:.6e} (ε = {:.1e})", schedule.eps * r0, schedule.eps),
        ));
    }
    let degree = schedule.degree.unwrap_or(default_degree(a)).max(a.degree() + 1);
    let mut current = a.widened(degree).into_complex();
    let mut trace = KamTrace::new(TraceKind::Realization);
    let mut steps: Vec<AnnulusMap> = Vec::new();
    let mut torus_steps: Vec<TorusMapLift> = Vec::new();
    let mut prev: Option<(f64, f64, f64)> = None;
    let mut warned = false;
    let mut m = 0;
    loop {
        let r = schedule.r(n, m);
        let delta = schedule.delta(n, m);
        let size = current.coeff_norm(r);
        let residual = current.real_sup(2 * degree + 1);
        let contraction = prev.map(|(pa, pr, pd)| size * pr * pd / (pa * pa));
        let in_regime = size <= r * delta * delta / c8(n);
        if !in_regime && !warned && size > schedule.stop_tol {
            warned = true;
            trace.warn(format!(
                "iteration {m}: a_m = {size:.3e} above r_mδ_m²/c₈ = {:.3e}; outside the proven regime",
                r * delta * delta / c8(n)
            ));
        }
        trace.records.push(KamRecord {
            m,
            r_m: r,
            delta_m: delta,
            size,
            big_b: None,
            contraction,
            residual,
            in_regime,
        });
        if size <= schedule.stop_tol {
            break;
        }
        if m >= schedule.max_iter {
            return Err(Error::Diverged {
                stage: "realize_form",
                detail: format!("a_m = {size:.3e} after {m} iterations"),
                trace: Some(Box::new(trace)),
            });
        }
        // the obstruction coefficient is invariant; clear its rounding noise
        let mut cleaned = current.clone();
        cleaned.set_coeff(&vec![-1; n], ZERO);
        let step = match realization_step_with(&cleaned, r, delta, degree) {
            Ok(s) => s,
            Err(e) => {
                let detail = format!("iteration {m}: {e}");
                return Err(match e {
                    Error::Hypothesis { bound, .. } => Error::Hypothesis { bound, detail },
                    _ => Error::Diverged {
                        stage: "realize_form",
                        detail,
                        trace: Some(Box::new(trace)),
                    },
                });
            }
        };
        torus_steps.push(step.map.to_torus_map()?);
        steps.push(step.map);
        // the field carries one extra degree; keep the working degree fixed
        current = step.a_hat.resize(degree).0;
        // rounding noise in high modes is amplified by the strip weights
        current.chop(f64::EPSILON);
        prev = Some((size, r, delta));
        m += 1;
    }

    let phi = invert_chain(&torus_steps, n, degree, r0 / 8.0)?;
    let phi_map = AnnulusMap::from_torus_map(&phi)?;
    let checks = final_checks(a, &phi, &torus_steps, r0)?;
    Ok(Realization {
        map: phi_map,
        steps,
        trace,
        det_residual: checks.det_residual,
        inverse_residual: checks.inverse_residual,
        phase_gradient_min: checks.phase_gradient_min,
        det_min: checks.det_min,
        injectivity_ratio: checks.injectivity_ratio,
    })
}

/// Applies `maps[0]∘maps[1]∘…` to `θ`.
fn apply_chain(evals: &mut [MapEvaluator], theta: &[Complex64]) -> Vec<Complex64> {
    let mut z = theta.to_vec();
    for ev in evals.iter_mut().rev() {
        z = ev.value(&z);
    }
    z
}

/// Composes `Ψ = ψ₀∘ψ₁∘…∘ψ_M` and inverts it by `ξ ↦ θ − Ψ̃(ξ) + ξ`, the
/// contraction `u ← −f(θ + u)` for `Ψ̃(θ) = θ + f(θ)`.
fn invert_chain(maps: &[TorusMapLift], n: usize, degree: usize, r: f64) -> Result<TorusMapLift> {
    let Some((last, rest)) = maps.split_last() else {
        return Ok(TorusMapLift::identity(n, degree));
    };
    let mut psi = last.clone();
    for m in rest.iter().rev() {
        psi = flows::compose_maps(m, &psi, degree)?;
    }
    Ok(flows::invert_map_with(&psi, r, degree)?.map)
}

struct FinalChecks {
    det_residual: f64,
    inverse_residual: f64,
    phase_gradient_min: f64,
    det_min: f64,
    injectivity_ratio: f64,
}

fn final_checks(a: &PeriodicSeries, phi: &TorusMapLift, steps: &[TorusMapLift], r0: f64) -> Result<FinalChecks> {
    let n = a.dim();
    // odd and finer than the construction grid, so sampling is exact
    let grid = Grid::new(n, 2 * phi.degree().max(a.degree()) + 3);
    let f: Vec<Vec<Complex64>> = phi.parts().iter().map(|p| grid.sample(p)).collect();
    let df: Vec<Vec<Vec<Complex64>>> = phi
        .parts()
        .iter()
        .map(|p| (0..n).map(|l| grid.sample(&p.derivative(l))).collect())
        .collect();
    let av = grid.sample(a);
    let da: Vec<Vec<Complex64>> = (0..n).map(|j| grid.sample(&a.derivative(j))).collect();
    let mut det_residual: f64 = 0.0;
    let mut det_min = f64::INFINITY;
    let mut grad_min = f64::INFINITY;
    for idx in 0..grid.len() {
        let jac = (0..n)
            .map(|k| (0..n).map(|l| df[k][l][idx] + if k == l { ONE } else { ZERO }).collect())
            .collect();
        let shift: Complex64 = f.iter().map(|col| col[idx]).sum();
        let det = (I * shift).exp() * det_complex(jac);
        let one_a = ONE + av[idx];
        det_residual = det_residual.max((det - one_a).norm());
        det_min = det_min.min(det.norm());
        // phase of φ*Ω: μ = Σθ_j + arg(1 + a), so ∂_jμ = 1 + Im(∂_j a/(1 + a))
        let g2: f64 = da.iter().map(|g| (1.0 + (g[idx] / one_a).im).powi(2)).sum();
        grad_min = grad_min.min(g2.sqrt());
    }
    // pairwise distances on a subsample of at most about 600 points
    let stride = grid.len().div_ceil(600);
    let mut pt = vec![0.0; n];
    let images: Vec<(Vec<Complex64>, Vec<Complex64>)> = (0..grid.len())
        .step_by(stride)
        .map(|idx| {
            grid.point_into(idx, &mut pt);
            let z = pt.iter().map(|&x| (I * x).exp()).collect();
            let w = pt.iter().zip(&f).map(|(&x, col)| (I * (col[idx] + x)).exp()).collect();
            (z, w)
        })
        .collect();
    let mut inj = f64::INFINITY;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let dz = dist(&images[i].0, &images[j].0);
            let dw = dist(&images[i].1, &images[j].1);
            inj = inj.min(dw / dz);
        }
    }
    let mut mev = MapEvaluator::new(phi);
    // Ψ∘φ on the distinguished boundary of A_{r₀/8} and on the torus
    let mut evals: Vec<MapEvaluator> = steps.iter().map(MapEvaluator::new).collect();
    let mut inverse_residual: f64 = 0.0;
    for p in probe_points(n, 16) {
        for s in 0..3usize.pow(n as u32) {
            let theta: Vec<Complex64> = (0..n)
                .map(|j| {
                    let y = [0.0, r0 / 8.0, -r0 / 8.0][(s / 3usize.pow(j as u32)) % 3];
                    Complex64::new(p[j], y)
                })
                .collect();
            let img = apply_chain(&mut evals, &mev.value(&theta));
            for j in 0..n {
                let d = (I * img[j]).exp() - (I * theta[j]).exp();
                inverse_residual = inverse_residual.max(d.norm());
            }
        }
    }
    Ok(FinalChecks {
        det_residual,
        inverse_residual,
        phase_gradient_min: grad_min,
        det_min,
        injectivity_ratio: inj,
    })
}

fn dist(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
}
