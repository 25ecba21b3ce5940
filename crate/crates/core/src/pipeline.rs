//! From a near-identity embedding `φ: Tⁿ → ℂⁿ` to its unimodular invariant
//! `(ρ₀, k)` and the normal-form embedding built from it.
//!
//! Stages: the Jacobian density `1 + a = det D_zφ`, its polar split
//! `(1 + b₁) e^{ih₁}`, the shear `θ₁′ = θ₁ + … + θ_n`, Moser's volume
//! normalization, and the fibering KAM loop on the transported phase. The
//! composite normalizer `N` satisfies
//! `(1 + a(Nθ)) e^{iΣ(Nθ)} det DN(θ) = ρ₀ e^{i(Σθ + k(Σθ))}`.
//!
//! Gauge: the pulled-back form carries the constant `iⁿ`, and the curve with
//! `g′ = ρ₀e^{i(θ+k)}` for `k = 0` is `−iρ₀e^{iθ}`. The first component of the
//! normal-form embedding is multiplied by `i` so that the circle gives the
//! identity.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::curve::{embedding_check, CurveImmersion, PHASE_GRID};
use crate::error::{check_strip, Bound, Error, Result};
use crate::fibering::{self, fibering_normalize, FiberingPhase, KamSchedule, KamTrace};
use crate::flows::{compose_maps, det_complex, invert_map_with, probe_points, MapEvaluator, TorusMapLift};
use crate::grid::Grid;
use crate::moser::{moser_normalize, VolumeDensity};
use crate::realization::{AnnulusFunction, AnnulusMap};
use crate::series::{PeriodicSeries, PointEvaluator, COEFF_TOL};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Residual each stage must meet before the next one runs.
pub const STAGE_TOL: f64 = 1e-8;
/// Largest admissible `|[e^{i(θ+k)}]|`.
pub const EXACTNESS_TOL: f64 = 1e-8;
/// Smallest admissible `|det D_zφ|` on the verification grid.
pub const TOTALLY_REAL_TOL: f64 = 1e-8;
/// Coefficient mass discarded when trimming intermediate series.
const TRIM_TOL: f64 = 1e-15;
/// Off-grid accuracy of adaptively expanded series.
const EXPAND_TOL: f64 = 1e-14;

/// An embedding `θ ↦ (φ₁(e^{iθ}), …, φ_n(e^{iθ}))`, holomorphic on `A_{r₀}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusEmbedding {
    pub r0: f64,
    pub components: Vec<AnnulusFunction>,
}

impl TorusEmbedding {
    pub fn new(components: Vec<AnnulusFunction>, r0: f64) -> Result<Self> {
        check_strip(r0)?;
        let n = components.len();
        if n == 0 {
            return Err(Error::InvalidInput("embedding needs at least one component".into()));
        }
        for c in &components {
            crate::error::check_dim(n, c.dim())?;
        }
        Ok(TorusEmbedding { r0, components })
    }

    /// `φ_j = z_j`.
    pub fn identity(n: usize, r0: f64) -> Result<Self> {
        let comps = (0..n)
            .map(|j| {
                let mut k = vec![0; n];
                k[j] = 1;
                PeriodicSeries::monomial(n, 1, &k, ONE)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps, r0)
    }

    /// `φ_j = z_j g_j(z)` from the stored logarithms, expanded adaptively.
    pub fn from_annulus_map(map: &AnnulusMap, r0: f64) -> Result<Self> {
        let comps = map
            .log_g
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let g = PeriodicSeries::map_pointwise_adaptive(&[l], l.degree().max(1), false, EXPAND_TOL, |v| {
                    v[0].exp()
                })?;
                Ok(shift_index(&g, j, 1))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps, r0)
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn degree(&self) -> usize {
        self.components.iter().map(|c| c.degree()).max().unwrap_or(0)
    }

    /// `max_j ‖φ_j − z_j‖_{r₀}`.
    pub fn closeness(&self) -> f64 {
        let n = self.dim();
        self.components
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let mut k = vec![0; n];
                k[j] = 1;
                let mut d = c.widened(1).into_complex();
                d.set_coeff(&k, d.coeff(&k) - ONE);
                d.coeff_norm(self.r0)
            })
            .fold(0.0, f64::max)
    }

    /// `φ(e^{iθ})` for complex `θ`.
    pub fn eval_theta(&self, theta: &[Complex64]) -> Result<Vec<Complex64>> {
        self.components.iter().map(|c| c.eval(theta)).collect()
    }

    /// `det D_zφ` at `z = e^{iθ}`, from `∂_θ φ = D_zφ · diag(iz)`.
    pub fn det_dz(&self, theta: &[Complex64]) -> Complex64 {
        let n = self.dim();
        let mut ev = PointEvaluator::new(n, self.degree());
        ev.set_point(theta);
        let jac: Vec<Vec<Complex64>> = self
            .components
            .iter()
            .map(|c| (0..n).map(|l| ev.eval(&c.derivative(l))).collect())
            .collect();
        let sum: Complex64 = theta.iter().sum();
        det_complex(jac) * (-I * sum).exp() / I.powi(n as i32)
    }
}

/// Moves every coefficient from index `k` to `k + s·e_j`.
fn shift_index(s: &PeriodicSeries, j: usize, by: i32) -> PeriodicSeries {
    let n = s.dim();
    let mut out = PeriodicSeries::zeros(n, s.degree() + by.unsigned_abs() as usize).into_complex();
    for (k, c) in s.terms() {
        let mut k = k.0;
        k[j] += by;
        out.set_coeff(&k, c);
    }
    out
}

fn real_point(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// `a = det D_zφ − 1` as a series, exact up to rounding.
///
/// Refuses with [`Bound::TotallyReal`] when `|det D_zφ|` nearly vanishes on
/// the grid.
pub fn jacobian_density(phi: &TorusEmbedding) -> Result<AnnulusFunction> {
    let n = phi.dim();
    let d = phi.degree();
    // det ∂_θφ has degree ≤ nD per axis; the factor e^{−iΣθ} adds one
    let deg = n * d + 1;
    let grid = Grid::for_degree(n, deg, 1);
    let partials: Vec<Vec<Vec<Complex64>>> = phi
        .components
        .iter()
        .map(|c| (0..n).map(|l| grid.sample(&c.derivative(l))).collect())
        .collect();
    let norm = I.powi(n as i32);
    let dets: Vec<Complex64> = grid.map_points(|idx, pt| {
        let jac: Vec<Vec<Complex64>> = (0..n).map(|j| (0..n).map(|l| partials[j][l][idx]).collect()).collect();
        let s: f64 = pt.iter().sum();
        det_complex(jac) * Complex64::from_polar(1.0, -s) / norm
    });
    let min = dets.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
    if !(min > TOTALLY_REAL_TOL) {
        return Err(Error::hypothesis(Bound::TotallyReal, format!("min |det D_zφ| = {min:.3e}")));
    }
    let values: Vec<Complex64> = dets.iter().map(|v| v - ONE).collect();
    let a = grid.expand(&values, deg, false).series;
    Ok(a.trimmed(TRIM_TOL).0)
}

/// `1 + a = (1 + b₁) e^{ih₁}` on `ℝⁿ`, with `b₁` and `h₁` real.
#[derive(Clone, Debug)]
pub struct PolarSplit {
    pub b: PeriodicSeries,
    pub h: PeriodicSeries,
    /// `sup |(1 + b₁)e^{ih₁} − (1 + a)|` on a grid off the construction grid.
    pub reconstruction: f64,
}

/// Modulus and phase of `1 + a`. Refuses with [`Bound::Branch`] unless
/// `|a| < 1/2` on the grid.
pub fn polar_split(a: &AnnulusFunction) -> Result<PolarSplit> {
    let n = a.dim();
    let grid = Grid::for_degree(n, a.degree(), 2);
    let max = grid.sample(a).iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(max < 0.5) {
        return Err(Error::hypothesis(Bound::Branch, format!("max |a| = {max:.3e}")));
    }
    let start = a.degree().max(1);
    let b = PeriodicSeries::map_pointwise_adaptive(&[a], start, true, EXPAND_TOL, |v| {
        Complex64::new((ONE + v[0]).norm() - 1.0, 0.0)
    })?;
    let h = PeriodicSeries::map_pointwise_adaptive(&[a], start, true, EXPAND_TOL, |v| {
        Complex64::new((ONE + v[0]).arg(), 0.0)
    })?;
    let deg = a.degree().max(b.degree()).max(h.degree());
    let check = Grid::new(n, 2 * deg + 3);
    let (va, vb, vh) = (check.sample(a), check.sample(&b), check.sample(&h));
    let reconstruction = (0..check.len())
        .map(|i| ((1.0 + vb[i].re) * Complex64::from_polar(1.0, vh[i].re) - ONE - va[i]).norm())
        .fold(0.0, f64::max);
    Ok(PolarSplit { b, h, reconstruction })
}

/// Knobs for [`theorem_m_normalize`].
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    /// Smallness constant handed to the fibering loop.
    pub fiber_eps: f64,
    pub fiber_stop_tol: f64,
    pub max_iter: usize,
    /// Working degree of the fibering loop; defaults to its own rule.
    pub degree: Option<usize>,
    pub stage_tol: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            fiber_eps: fibering::DEFAULT_EPS,
            fiber_stop_tol: fibering::DEFAULT_STOP_TOL,
            max_iter: fibering::DEFAULT_MAX_ITER,
            degree: None,
            stage_tol: STAGE_TOL,
        }
    }
}

/// Residual and hypothesis margins recorded after one stage.
#[derive(Clone, Debug, Serialize)]
pub struct StageRecord {
    pub stage: &'static str,
    pub residual: f64,
    /// `min |∇μ|` of the current phase on the grid.
    pub phase_gradient_min: f64,
    /// `min (1 + b)` of the current density on the grid.
    pub density_min: f64,
}

/// Residuals of the whole pipeline.
#[derive(Clone, Debug, Serialize)]
pub struct Residuals {
    /// `sup |(1 + a(Nθ)) e^{iΣNθ} det DN − ρ₀e^{i(Σθ + k(Σθ))}| / ρ₀`.
    pub phase: f64,
    /// `|ρ₀ − (1 + [b₁])|`, the Moser mean against the total volume.
    pub volume: f64,
    /// `|[e^{i(θ + k)}]|`.
    pub exactness_defect: f64,
    /// Fibering residual `sup |μ∘Φ̃ − θ₁ − k|` and `sup |det DΦ − 1|`.
    pub fibering: f64,
    pub fibering_det: f64,
}

/// The unimodular invariant of an embedding together with the evidence.
#[derive(Clone, Debug, Serialize)]
pub struct InvariantReport {
    pub n: usize,
    pub r0: f64,
    /// `1 + [b]`, the normal-form amplitude.
    pub rho0: f64,
    /// `(2π)ⁿ ρ₀`, the total volume of `|ω_φ|`.
    pub total_volume: f64,
    /// `[a]` as `[re, im]`.
    pub mean_a: [f64; 2],
    /// `k(θ₁)` with `[k] = 0`.
    pub k: PeriodicSeries,
    /// The curve `g` with `g′ = ρ₀e^{i(θ + k)}` and `[g] = 0`.
    pub g: PeriodicSeries,
    /// `N = φ₀⁻¹φ₁⁻¹Φφ₀`, the shear `φ₀` applied first.
    pub normalizer: TorusMapLift,
    /// `max_j ‖φ_j − z_j‖_{r₀}`.
    pub closeness: f64,
    /// `min (1 + k′)`.
    pub min_phase_derivative: f64,
    pub residuals: Residuals,
    pub stages: Vec<StageRecord>,
    pub trace: KamTrace,
    pub gauge: String,
}

/// Grid minima of `|∇μ|` for `μ = ⟨e, θ⟩ + h` and of `1 + b`.
fn stage_margins(linear: &[f64], h: &PeriodicSeries, b: Option<&PeriodicSeries>) -> (f64, f64) {
    let n = h.dim();
    let deg = h.degree().max(b.map_or(0, |b| b.degree()));
    let grid = Grid::new(n, 2 * deg + 3);
    let grads: Vec<Vec<Complex64>> = (0..n).map(|j| grid.sample(&h.derivative(j))).collect();
    let grad_min = (0..grid.len())
        .map(|i| {
            (0..n)
                .map(|j| (linear[j] + grads[j][i].re).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min);
    let dens_min = b.map_or(1.0, |b| {
        grid.sample(b).iter().map(|v| 1.0 + v.re).fold(f64::INFINITY, f64::min)
    });
    (grad_min, dens_min)
}

fn check_stage(
    stages: &mut Vec<StageRecord>,
    stage: &'static str,
    residual: f64,
    margins: (f64, f64),
    tol: f64,
) -> Result<()> {
    stages.push(StageRecord {
        stage,
        residual,
        phase_gradient_min: margins.0,
        density_min: margins.1,
    });
    if !(residual <= tol) {
        return Err(Error::hypothesis(
            Bound::StageResidual,
            format!("{stage}: residual {residual:.3e} above {tol:.1e}"),
        ));
    }
    if !(margins.0 > 0.0) {
        return Err(Error::hypothesis(
            Bound::NonCritical,
            format!("{stage}: min |∇μ| = {:.3e}", margins.0),
        ));
    }
    if !(margins.1 > 0.0) {
        return Err(Error::hypothesis(
            Bound::PositiveDensity,
            format!("{stage}: min (1 + b) = {:.3e}", margins.1),
        ));
    }
    Ok(())
}

/// `θ₁′ = θ₁ + … + θ_n`, `θ_j′ = θ_j` for `j ≥ 2`.
pub fn shear_matrix(n: usize) -> Vec<Vec<i64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == 0 || i == j { 1 } else { 0 }).collect())
        .collect()
}

fn shear_inverse(n: usize) -> Vec<Vec<i64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| match (i, j) {
                    (0, 0) => 1,
                    (0, _) => -1,
                    _ if i == j => 1,
                    _ => 0,
                })
                .collect()
        })
        .collect()
}

/// Runs the full pipeline with default settings.
pub fn theorem_m_normalize(phi: &TorusEmbedding) -> Result<InvariantReport> {
    theorem_m_normalize_with(phi, &PipelineConfig::default())
}

/// Extracts `(ρ₀, k)` and the normalizer, checking every stage.
///
/// Moser and fibering run on the strip of width `r₀/2`.
pub fn theorem_m_normalize_with(phi: &TorusEmbedding, cfg: &PipelineConfig) -> Result<InvariantReport> {
    let n = phi.dim();
    if n < 2 {
        return Err(Error::hypothesis(Bound::DimensionTwo, format!("n = {n}")));
    }
    let r0 = phi.r0;
    let r = r0 / 2.0;
    let tol = cfg.stage_tol;
    let mut stages = Vec::new();
    let mut diag = vec![0.0; n];
    diag[0] = 1.0;
    let ones = vec![1.0; n];

    let a = jacobian_density(phi)?;
    let mean_a = a.mean();
    let split = polar_split(&a)?;
    let (b1, h1) = (split.b, split.h);
    check_stage(
        &mut stages,
        "polar_split",
        split.reconstruction,
        stage_margins(&ones, &h1, Some(&b1)),
        tol,
    )?;

    // shear: μ₁ = θ₁′ + h₂(θ′) with h₂ = h₁∘φ₀⁻¹
    let inv = shear_inverse(n);
    let (h2, _) = h1.compose_linear(&inv, 2 * h1.degree());
    let (b2, _) = b1.compose_linear(&inv, 2 * b1.degree());
    let (h2, b2) = (h2.trimmed(TRIM_TOL).0, b2.trimmed(TRIM_TOL).0);
    check_stage(&mut stages, "shear", 0.0, stage_margins(&diag, &h2, Some(&b2)), tol)?;

    let moser = moser_normalize(&VolumeDensity::new(b2.clone())?, r)?;
    let rho0 = 1.0 + moser.mean;
    let f1 = moser.map.parts()[0].trimmed(TRIM_TOL).0;
    let moser_map = TorusMapLift::from_parts(moser.map.parts().iter().map(|p| p.trimmed(TRIM_TOL).0).collect())?;
    check_stage(&mut stages, "moser", moser.residual, (1.0, 1.0), tol)?;

    let work = moser_map.degree().max(h2.degree());
    let inverse = invert_map_with(&moser_map, r, work)?;
    let moser_inv = {
        let parts = inverse.map.parts().iter().map(|p| p.trimmed(TRIM_TOL).0).collect();
        TorusMapLift::from_parts(parts)?
    };
    check_stage(&mut stages, "moser_inverse", inverse.residual, (1.0, 1.0), tol)?;

    let shifted = &h2.widened(f1.degree()) - &f1.widened(h2.degree());
    let h3 = shifted
        .compose(&moser_inv, work.max(shifted.degree()))?
        .series
        .real_part()
        .trimmed(TRIM_TOL)
        .0;
    let transport = transport_residual(&shifted, &h3, &moser_map);
    check_stage(&mut stages, "phase_transport", transport, stage_margins(&diag, &h3, None), tol)?;

    let mut schedule = KamSchedule::new(r);
    schedule.eps = cfg.fiber_eps;
    schedule.stop_tol = cfg.fiber_stop_tol;
    schedule.max_iter = cfg.max_iter;
    schedule.degree = cfg.degree;
    let fib = fibering_normalize(&FiberingPhase::new(h3)?, &schedule)?;
    check_stage(
        &mut stages,
        "fibering",
        fib.residual.max(fib.det_residual),
        (1.0, 1.0),
        tol,
    )?;

    let degree = fib.normalizer.degree().max(moser_inv.degree());
    let shear = TorusMapLift::linear(shear_matrix(n), 0)?;
    let unshear = TorusMapLift::linear(inv, 0)?;
    let inner = compose_maps(&fib.normalizer, &shear, 2 * degree)?;
    let inner = compose_maps(&moser_inv, &inner, 2 * degree)?;
    let normalizer = compose_maps(&unshear, &inner, 2 * degree)?;
    let normalizer = TorusMapLift::new(
        normalizer.matrix().to_vec(),
        normalizer.parts().iter().map(|p| p.trimmed(TRIM_TOL).0).collect(),
    )?;

    let k = fib.k.clone();
    let g = build_g(&k, rho0)?;
    let exactness_defect = exactness_defect(&k)?;
    let phase = normal_form_residual(phi, &a, &normalizer, &k, rho0);
    check_stage(&mut stages, "normal_form", phase, (1.0, 1.0), tol)?;
    let min_phase_derivative = Grid::new(1, PHASE_GRID)
        .sample(&k.derivative(0))
        .iter()
        .map(|v| 1.0 + v.re)
        .fold(f64::INFINITY, f64::min);

    Ok(InvariantReport {
        n,
        r0,
        rho0,
        total_volume: (2.0 * PI).powi(n as i32) * rho0,
        mean_a: [mean_a.re, mean_a.im],
        k,
        g: g.series().clone(),
        normalizer,
        closeness: phi.closeness(),
        min_phase_derivative,
        residuals: Residuals {
            phase,
            volume: (rho0 - 1.0 - b1.mean().re).abs(),
            exactness_defect,
            fibering: fib.residual,
            fibering_det: fib.det_residual,
        },
        stages,
        trace: fib.trace,
        gauge: format!(
            "φ*(dz₁∧…∧dz_n) = i^{n} ρ₀ e^{{i(Σθ + k(Σθ))}} dθ after N; g′ = ρ₀e^{{i(θ+k)}}, so k = 0 gives g = −iρ₀e^{{iθ}}"
        ),
    })
}

/// `sup |h₃(φ₁(θ)) − (h₂ − f₁)(θ)|` at probe points.
fn transport_residual(source: &PeriodicSeries, h3: &PeriodicSeries, moser: &TorusMapLift) -> f64 {
    let n = source.dim();
    let mut me = MapEvaluator::new(moser);
    let mut pe = PointEvaluator::new(n, h3.degree().max(source.degree()));
    probe_points(n, 64)
        .iter()
        .map(|p| {
            let z = real_point(p);
            pe.set_point(&z);
            let want = pe.eval(source);
            pe.set_point(&me.value(&z));
            (pe.eval(h3) - want).norm()
        })
        .fold(0.0, f64::max)
}

/// End-to-end check of the normal form on a real grid, evaluating `a` at
/// `N(θ)` and `det DN` from the composed map.
fn normal_form_residual(
    phi: &TorusEmbedding,
    a: &PeriodicSeries,
    normalizer: &TorusMapLift,
    k: &PeriodicSeries,
    rho0: f64,
) -> f64 {
    let n = phi.dim();
    let grid = fibering::verification_grid(n, normalizer.degree().max(a.degree()));
    let mut ev = MapEvaluator::new(normalizer);
    let mut pa = PointEvaluator::new(n, a.degree());
    let mut pk = PointEvaluator::new(1, k.degree());
    (0..grid.len())
        .map(|idx| {
            let z = real_point(&grid.point(idx));
            let img = ev.value(&z);
            let det = det_complex(ev.jacobian(&z));
            pa.set_point(&img);
            let s_img: Complex64 = img.iter().sum();
            let lhs = (ONE + pa.eval(a)) * (I * s_img).exp() * det;
            let s: Complex64 = z.iter().sum();
            pk.set_point(&[s]);
            let rhs = rho0 * (I * (s + pk.eval(k))).exp();
            (lhs - rhs).norm() / rho0
        })
        .fold(0.0, f64::max)
}

/// `ρ₀e^{iθ}e^{ik(θ)}` as a series.
fn phase_series(k: &PeriodicSeries, rho0: f64) -> Result<PeriodicSeries> {
    let e = PeriodicSeries::map_pointwise_adaptive(&[k], k.degree().max(1), false, EXPAND_TOL, |v| {
        (I * v[0]).exp()
    })?;
    Ok(shift_index(&e, 0, 1).scale_real(rho0))
}

fn require_phase(k: &PeriodicSeries) -> Result<()> {
    crate::error::check_dim(1, k.dim())?;
    if !k.is_real() {
        return Err(Error::InvalidInput("k must be real".into()));
    }
    let m = k.mean().norm();
    if m > COEFF_TOL {
        return Err(Error::hypothesis(Bound::I2, format!("[k] = {m:.3e} ≠ 0")));
    }
    let min = Grid::new(1, PHASE_GRID)
        .sample(&k.derivative(0))
        .iter()
        .map(|v| 1.0 + v.re)
        .fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::hypothesis(Bound::NonCritical, format!("min (1 + k′) = {min:.3e}")));
    }
    Ok(())
}

/// `|[e^{i(θ + k(θ))}]|`, which must vanish for `g` to close up.
pub fn exactness_defect(k: &PeriodicSeries) -> Result<f64> {
    require_phase(k)?;
    Ok(phase_series(k, 1.0)?.mean().norm())
}

/// The mean-zero antiderivative of `ρ₀e^{i(θ + k)}`. Refuses unless
/// `[k] = 0`, `1 + k′ > 0` and the exactness defect is at most
/// [`EXACTNESS_TOL`]; the result is checked to be non-critical of degree one.
pub fn build_g(k: &PeriodicSeries, rho0: f64) -> Result<CurveImmersion> {
    require_phase(k)?;
    if !(rho0 > 0.0) {
        return Err(Error::InvalidInput(format!("ρ₀ = {rho0} must be positive")));
    }
    let mut dg = phase_series(k, rho0)?;
    let defect = dg.mean().norm() / rho0;
    if defect > EXACTNESS_TOL {
        return Err(Error::hypothesis(
            Bound::Exactness,
            format!("|[e^{{i(θ+k)}}]| = {defect:.6e} > {EXACTNESS_TOL:.0e}"),
        ));
    }
    dg.set_coeff(&[0], ZERO);
    let g = CurveImmersion::new(dg.antiderivative(0)?)?;
    let rep = embedding_check(&g)?;
    if rep.degree != 1 {
        return Err(Error::hypothesis(Bound::Embedding, format!("d_g = {}", rep.degree)));
    }
    Ok(g)
}

/// `ψ = (i ζ⁻¹ g(ζz₁), z₂, …, z_n)` with `ζ = z₂⋯z_n`, checked against the
/// normal form to [`STAGE_TOL`].
pub fn normal_form_embedding(g: &CurveImmersion, n: usize, r0: f64) -> Result<TorusEmbedding> {
    if n < 2 {
        return Err(Error::hypothesis(Bound::DimensionTwo, format!("n = {n}")));
    }
    let rep = embedding_check(g)?;
    if rep.degree != 1 {
        return Err(Error::hypothesis(Bound::Embedding, format!("d_g = {}", rep.degree)));
    }
    let gs = g.series();
    let d = gs.degree() + 1;
    let mut first = PeriodicSeries::zeros(n, d).into_complex();
    for (m, c) in gs.terms() {
        let m = m.0[0];
        let mut idx = vec![m - 1; n];
        idx[0] = m;
        first.set_coeff(&idx, I * c);
    }
    let mut comps = vec![first.trimmed(0.0).0];
    for j in 1..n {
        let mut k = vec![0; n];
        k[j] = 1;
        comps.push(PeriodicSeries::monomial(n, 1, &k, ONE)?);
    }
    let psi = TorusEmbedding::new(comps, r0)?;
    let res = embedding_form_residual(&psi, g)?;
    if !(res <= STAGE_TOL) {
        return Err(Error::hypothesis(
            Bound::StageResidual,
            format!("normal_form_embedding: residual {res:.3e} above {STAGE_TOL:.1e}"),
        ));
    }
    Ok(psi)
}

/// `sup |det D_zψ(θ) − g′(Σθ) e^{−iΣθ}|` on a real grid.
pub fn embedding_form_residual(psi: &TorusEmbedding, g: &CurveImmersion) -> Result<f64> {
    let n = psi.dim();
    let a = jacobian_density(psi)?;
    let grid = Grid::new(n, (2 * a.degree() + 3).min(64));
    let vals = grid.sample(&a);
    let dg = g.derivative();
    Ok((0..grid.len())
        .map(|idx| {
            let s: f64 = grid.point(idx).iter().sum();
            let want = dg.eval_real_point(&[s]).expect("one-dimensional") * Complex64::from_polar(1.0, -s);
            (ONE + vals[idx] - want).norm()
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_density() {
        let id = TorusEmbedding::identity(3, 0.5).unwrap();
        assert_eq!(id.closeness(), 0.0);
        let a = jacobian_density(&id).unwrap();
        assert!(a.coeff_norm(0.0) < 1e-13);
    }

    #[test]
    fn shear_matrices_are_inverse() {
        for n in 2..5 {
            let a = shear_matrix(n);
            let b = shear_inverse(n);
            for i in 0..n {
                for j in 0..n {
                    let v: i64 = (0..n).map(|l| a[i][l] * b[l][j]).sum();
                    assert_eq!(v, (i == j) as i64);
                }
            }
        }
    }

    #[test]
    fn circle_gives_identity() {
        let psi = normal_form_embedding(&CurveImmersion::circle(), 2, 0.5).unwrap();
        let id = TorusEmbedding::identity(2, 0.5).unwrap();
        for (p, q) in psi.components.iter().zip(&id.components) {
            let d = &p.widened(q.degree()) - &q.widened(p.degree()).into_complex();
            assert!(d.coeff_norm(0.0) < 1e-15);
        }
    }

    #[test]
    fn shift_index_moves_terms() {
        let s = PeriodicSeries::monomial(2, 1, &[1, -1], ONE).unwrap();
        let t = shift_index(&s, 1, 1);
        assert_eq!(t.coeff(&[1, 0]), ONE);
    }
}
