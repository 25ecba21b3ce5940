//! Immersed closed curves `f: S¹ → ℂ`: Gauss degree, non-criticality, the
//! non-critical regular homotopy between curves of equal degree, and the
//! embedding criterion for non-critical curves.
//!
//! A curve is a one-dimensional complex series `f(θ)`. Writing
//! `f′ = ρ e^{iμ}`, the curve is non-critical when `μ′` never vanishes; the
//! Gauss degree `d` is the winding number of `f′` around the origin.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{check_dim, Bound, Error, Result};
use crate::flows::probe_points;
use crate::grid::Grid;
use crate::series::{PeriodicSeries, PointEvaluator};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Default number of samples for phase unwrapping.
pub const PHASE_GRID: usize = 4096;
/// Largest grid tried when adjacent phase samples differ by too much.
const MAX_PHASE_GRID: usize = 1 << 16;
/// Smallest admissible `|f′|` on the grid.
pub const IMMERSION_TOL: f64 = 1e-10;
/// Smallest admissible `|μ′|` for the non-critical flag.
pub const NONCRITICAL_TOL: f64 = 1e-8;
/// Off-grid accuracy demanded of adaptively expanded series.
const EXPAND_TOL: f64 = 1e-12;
const MAX_EXPAND_DEGREE: usize = 4096;

/// A closed immersed curve `θ ↦ f(θ)` in `ℂ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveImmersion {
    f: PeriodicSeries,
    df: PeriodicSeries,
}

impl CurveImmersion {
    /// Refuses unless `f` is one-dimensional and `|f′| > 0` on the phase grid.
    pub fn new(f: PeriodicSeries) -> Result<Self> {
        check_dim(1, f.dim())?;
        let df = f.derivative(0);
        let min = Grid::new(1, PHASE_GRID)
            .sample(&df)
            .iter()
            .map(|v| v.norm())
            .fold(f64::INFINITY, f64::min);
        if !(min > IMMERSION_TOL) {
            return Err(Error::hypothesis(Bound::Immersion, format!("min |f′| = {min:.3e}")));
        }
        Ok(CurveImmersion { f, df })
    }

    /// The unit circle `f = −i e^{iθ}`, with `f′ = e^{iθ}`.
    pub fn circle() -> Self {
        Self::new(PeriodicSeries::monomial(1, 1, &[1], -I).expect("degree 1")).expect("immersed")
    }

    pub fn series(&self) -> &PeriodicSeries {
        &self.f
    }

    pub fn derivative(&self) -> &PeriodicSeries {
        &self.df
    }

    pub fn eval(&self, theta: f64) -> Complex64 {
        self.f.eval_real_point(&[theta]).expect("one-dimensional")
    }

    /// `ρ = |f′|` on an `m`-point grid.
    pub fn speed(&self, m: usize) -> Vec<f64> {
        Grid::new(1, m).sample(&self.df).iter().map(|v| v.norm()).collect()
    }
}

/// Unwrapped phase of `f′` on an `m`-point grid, or `None` if some adjacent
/// samples differ by more than `π/2`.
fn unwrapped_phase(df: &PeriodicSeries, m: usize) -> Option<(Vec<f64>, f64)> {
    let vals = Grid::new(1, m).sample(df);
    let mut phase = Vec::with_capacity(m);
    let mut acc = vals[0].arg();
    phase.push(acc);
    for i in 1..=m {
        let step = (vals[i % m] / vals[i - 1]).arg();
        if step.abs() > PI / 2.0 {
            return None;
        }
        acc += step;
        if i < m {
            phase.push(acc);
        }
    }
    let total = acc - phase[0];
    Some((phase, total))
}

fn phase_samples(df: &PeriodicSeries) -> Result<(Vec<f64>, f64)> {
    let mut m = PHASE_GRID;
    loop {
        if let Some(p) = unwrapped_phase(df, m) {
            return Ok(p);
        }
        m *= 2;
        if m > MAX_PHASE_GRID {
            return Err(Error::numerical("gauss_degree", "phase of f′ is not resolved on the grid"));
        }
    }
}

/// Winding number of `f′` around the origin.
pub fn gauss_degree(f: &CurveImmersion) -> Result<i64> {
    let (_, total) = phase_samples(&f.df)?;
    let w = total / (2.0 * PI);
    let d = w.round();
    if (w - d).abs() > 1e-6 {
        return Err(Error::numerical(
            "gauss_degree",
            format!("accumulated phase is {w:.9} turns"),
        ));
    }
    Ok(d as i64)
}

/// `μ′` on a grid and whether it keeps one sign away from zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    /// `μ′(θ_m)` at `θ_m = 2πm/M`.
    pub samples: Vec<f64>,
    pub min_abs: f64,
    pub noncritical: bool,
}

/// `μ′ = Im(f″/f′)` on the default phase grid.
pub fn noncritical_phase(f: &CurveImmersion) -> PhaseReport {
    noncritical_phase_on(f, PHASE_GRID)
}

pub fn noncritical_phase_on(f: &CurveImmersion, m: usize) -> PhaseReport {
    let grid = Grid::new(1, m);
    let d1 = grid.sample(&f.df);
    let d2 = grid.sample(&f.df.derivative(0));
    let samples: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| (b / a).im).collect();
    let min_abs = samples.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    // a sign change between samples is a zero the grid stepped over
    let one_sign = samples.iter().all(|&v| v > 0.0) || samples.iter().all(|&v| v < 0.0);
    PhaseReport {
        samples,
        min_abs,
        noncritical: one_sign && min_abs > NONCRITICAL_TOL,
    }
}

fn require_noncritical(f: &CurveImmersion) -> Result<()> {
    let rep = noncritical_phase(f);
    if rep.noncritical {
        Ok(())
    } else {
        Err(Error::hypothesis(
            Bound::NonCritical,
            format!("min |μ′| = {:.3e}", rep.min_abs),
        ))
    }
}

/// Expands a smooth periodic function of one variable, doubling the degree
/// until the interpolant matches `f` at off-grid points.
fn expand_adaptive(start: usize, what: &'static str, f: impl Fn(f64) -> Result<Complex64>) -> Result<PeriodicSeries> {
    let probes = probe_points(1, 32);
    let mut degree = start.max(8);
    loop {
        let grid = Grid::new(1, 2 * degree + 1);
        let vals = (0..grid.len())
            .map(|i| f(grid.point(i)[0]))
            .collect::<Result<Vec<_>>>()?;
        let s = grid.expand(&vals, degree, false).series;
        let scale = vals.iter().map(|v| v.norm()).fold(1.0, f64::max);
        let mut ev = PointEvaluator::new(1, degree);
        let mut err: f64 = 0.0;
        for p in &probes {
            ev.set_point(&[Complex64::new(p[0], 0.0)]);
            err = err.max((ev.eval(&s) - f(p[0])?).norm());
        }
        if err <= EXPAND_TOL * scale {
            return Ok(s);
        }
        degree *= 2;
        if degree > MAX_EXPAND_DEGREE {
            return Err(Error::numerical(
                what,
                format!("no resolving degree up to {MAX_EXPAND_DEGREE} (error {err:.3e})"),
            ));
        }
    }
}

/// `f̂ = f∘ψ⁻¹` in the parameter `s = μ(θ)/d`, in which `f̂′ = ρ̂(s) e^{ids}`.
#[derive(Clone, Debug)]
struct Reparametrized {
    /// `ℓ = log f′ − idθ`, periodic.
    log_df: PeriodicSeries,
    d: i64,
    /// `sup |Im ℓ|/|d|`, a bracket for `ψ(θ) − θ`.
    spread: f64,
    f_hat: PeriodicSeries,
}

impl Reparametrized {
    fn new(f: &CurveImmersion, d: i64) -> Result<Self> {
        let (phase, _) = phase_samples(&f.df)?;
        let m = phase.len();
        let grid = Grid::new(1, m);
        let dd = d as f64;
        // Im ℓ on the grid is periodic; off-grid values take the branch of
        // the principal argument nearest to the closest sample
        let h_ref: Vec<f64> = phase.iter().enumerate().map(|(j, p)| p - dd * grid.point(j)[0]).collect();
        let df = &f.df;
        let ell = |x: f64| -> Result<Complex64> {
            let v = df.eval_real_point(&[x])? * (-I * dd * x).exp();
            let j = (x.rem_euclid(2.0 * PI) / grid.spacing()).round() as usize % m;
            let mut h = v.arg();
            h += 2.0 * PI * ((h_ref[j] - h) / (2.0 * PI)).round();
            Ok(Complex64::new(v.norm().ln(), h))
        };
        let log_df = expand_adaptive(2 * f.f.degree(), "curve phase", ell)?;
        let spread = log_df.coeff_norm(0.0) / d.unsigned_abs() as f64;
        let mut out = Reparametrized {
            log_df,
            d,
            spread,
            f_hat: PeriodicSeries::zeros(1, 0),
        };
        let g = expand_adaptive(4 * f.f.degree(), "curve reparametrization", |s| {
            let (_, l, lp) = out.solve(s)?;
            Ok(l.re.exp() * dd / (dd + lp.im) * (I * dd * s).exp())
        })?;
        // [f̂′] = [f′] = 0 up to interpolation error
        let mut g0 = g;
        g0.set_coeff(&[0], Complex64::new(0.0, 0.0));
        let mut f_hat = g0.antiderivative(0)?;
        f_hat.set_coeff(&[0], f.f.mean());
        out.f_hat = f_hat;
        Ok(out)
    }

    /// `θ` with `θ + Im ℓ(θ)/d = s`, plus `ℓ(θ)` and `ℓ′(θ)`.
    fn solve(&self, s: f64) -> Result<(f64, Complex64, Complex64)> {
        let dd = self.d as f64;
        let dl = self.log_df.derivative(0);
        let eval = |t: f64| -> (Complex64, Complex64) {
            let z = [Complex64::new(t, 0.0)];
            (self.log_df.eval(&z).expect("1-D"), dl.eval(&z).expect("1-D"))
        };
        let mut lo = s - self.spread - 1e-12;
        let mut hi = s + self.spread + 1e-12;
        let mut t = s;
        for _ in 0..200 {
            let (l, lp) = eval(t);
            let fval = t + l.im / dd - s;
            if fval.abs() <= 1e-15 * (1.0 + s.abs()) {
                return Ok((t, l, lp));
            }
            if fval > 0.0 {
                hi = hi.min(t);
            } else {
                lo = lo.max(t);
            }
            let slope = 1.0 + lp.im / dd;
            let mut next = t - fval / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() <= 1e-16 * (1.0 + t.abs()) {
                let (l, lp) = eval(next);
                return Ok((next, l, lp));
            }
            t = next;
        }
        Err(Error::numerical("whitney_homotopy", format!("reparametrization did not converge at s = {s}")))
    }
}

/// The non-critical regular homotopy between two non-critical curves of the
/// same nonzero Gauss degree `d`.
///
/// Both curves are reparametrized so that their phases are exactly `ds`;
/// then `f_t = (1 − t) f̂₀ + t f̂₁`, whose derivative
/// `((1 − t)ρ̂₀ + tρ̂₁) e^{ids}` has phase derivative `d` for every `t`.
#[derive(Clone, Debug)]
pub struct WhitneyHomotopy {
    d: i64,
    ends: [Reparametrized; 2],
}

impl WhitneyHomotopy {
    pub fn new(f0: &CurveImmersion, f1: &CurveImmersion) -> Result<Self> {
        require_noncritical(f0)?;
        require_noncritical(f1)?;
        let d0 = gauss_degree(f0)?;
        let d1 = gauss_degree(f1)?;
        if d0 != d1 {
            return Err(Error::hypothesis(
                Bound::DegreeMatch,
                format!("Gauss degrees {d0} and {d1} differ; no regular homotopy exists"),
            ));
        }
        if d0 == 0 {
            return Err(Error::hypothesis(Bound::DegreeNonzero, "Gauss degree 0"));
        }
        Ok(WhitneyHomotopy {
            d: d0,
            ends: [Reparametrized::new(f0, d0)?, Reparametrized::new(f1, d0)?],
        })
    }

    pub fn degree(&self) -> i64 {
        self.d
    }

    /// `f_t`; `t` must lie in `[0, 1]`.
    pub fn at(&self, t: f64) -> Result<CurveImmersion> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::hypothesis(Bound::TimeRange, format!("t = {t}, need 0 ≤ t ≤ 1")));
        }
        let [a, b] = &self.ends;
        let deg = a.f_hat.degree().max(b.f_hat.degree());
        let f = &a.f_hat.widened(deg).scale_real(1.0 - t) + &b.f_hat.widened(deg).scale_real(t);
        CurveImmersion::new(f)
    }

    /// The reparametrization `s = ψ_j(θ) = μ_j(θ)/d` of endpoint `j`.
    pub fn reparametrization(&self, j: usize, theta: f64) -> f64 {
        let e = &self.ends[j];
        let l = e.log_df.eval_real_point(&[theta]).expect("1-D");
        theta + l.im / self.d as f64
    }
}

/// `f_t` for a single `t`.
pub fn whitney_homotopy(f0: &CurveImmersion, f1: &CurveImmersion, t: f64) -> Result<CurveImmersion> {
    WhitneyHomotopy::new(f0, f1)?.at(t)
}

/// Output of [`embedding_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingReport {
    /// `|d_f| = 1`.
    pub is_embedding: bool,
    /// `I_f = d_f − sign d_f`, the algebraic number of double points.
    pub i_f: i64,
    pub degree: i64,
    /// `min |f(θ) − f(θ′)|` over grid pairs at cyclic distance at least `π/16`,
    /// relative to the diameter of the image.
    pub min_separation: f64,
    /// Whether `min_separation` exceeds the injectivity margin.
    pub grid_injective: bool,
}

/// Relative separation below which two far-apart grid points count as a
/// double point.
pub const INJECTIVITY_MARGIN: f64 = 1e-6;

/// A non-critical curve is an embedding exactly when `d_f = ±1`.
pub fn embedding_check(f: &CurveImmersion) -> Result<EmbeddingReport> {
    require_noncritical(f)?;
    let d = gauss_degree(f)?;
    let m = 512;
    let pts = Grid::new(1, m).sample(&f.f);
    let gap = m / 32;
    let mut diam: f64 = 0.0;
    let mut sep = f64::INFINITY;
    for i in 0..m {
        for j in i + 1..m {
            let dist = (pts[i] - pts[j]).norm();
            diam = diam.max(dist);
            if (j - i).min(m - (j - i)) >= gap {
                sep = sep.min(dist);
            }
        }
    }
    let rel = sep / diam;
    Ok(EmbeddingReport {
        is_embedding: d.abs() == 1,
        i_f: d - d.signum(),
        degree: d,
        min_separation: rel,
        grid_injective: rel > INJECTIVITY_MARGIN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn ellipse() -> CurveImmersion {
        // cos θ + 2i sin θ = (3/2) e^{iθ} − (1/2) e^{−iθ}
        let f = PeriodicSeries::from_terms(1, 1, &[(vec![1], c(1.5, 0.0)), (vec![-1], c(-0.5, 0.0))]).unwrap();
        CurveImmersion::new(f).unwrap()
    }

    #[test]
    fn degrees_of_basic_curves() {
        assert_eq!(gauss_degree(&CurveImmersion::circle()).unwrap(), 1);
        let double = CurveImmersion::new(PeriodicSeries::monomial(1, 2, &[2], c(0.0, -0.5)).unwrap()).unwrap();
        assert_eq!(gauss_degree(&double).unwrap(), 2);
        assert_eq!(gauss_degree(&ellipse()).unwrap(), 1);
    }

    #[test]
    fn circle_phase_is_constant() {
        let rep = noncritical_phase(&CurveImmersion::circle());
        assert!(rep.noncritical);
        assert!(rep.samples.iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert!(noncritical_phase(&ellipse()).samples.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn embedding_examples() {
        let rep = embedding_check(&CurveImmersion::circle()).unwrap();
        assert!(rep.is_embedding && rep.grid_injective);
        assert_eq!(rep.i_f, 0);
        let double = CurveImmersion::new(PeriodicSeries::monomial(1, 2, &[2], c(0.0, -0.5)).unwrap()).unwrap();
        let rep = embedding_check(&double).unwrap();
        assert!(!rep.is_embedding && !rep.grid_injective);
        assert_eq!(rep.i_f, 1);
    }

    #[test]
    fn constant_curve_is_not_immersed() {
        let err = CurveImmersion::new(PeriodicSeries::constant(1, 1, c(1.0, 0.0))).unwrap_err();
        assert_eq!(err.bound(), Some(Bound::Immersion));
    }
}
