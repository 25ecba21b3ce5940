//! Periodic vector fields, their flows, and lifted torus maps.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_strip, Bound, Error, Result};
use crate::exec;
use crate::grid::Grid;
use crate::jet::{self, Jet};
use crate::series::{PeriodicSeries, PointEvaluator};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Minimum number of RK4 steps per unit of |t|.
pub const MIN_STEPS: usize = 32;
/// Per-point stopping increment for the inversion fixed point.
pub const INVERT_TOL: f64 = 1e-13;
pub const INVERT_MAX_ITER: usize = 200;
/// Defect above which a flow is reported as failed.
pub const FLOW_DEFECT_TOL: f64 = 1e-8;

/// Deterministic off-grid verification points (Kronecker sequence).
pub(crate) fn probe_points(n: usize, count: usize) -> Vec<Vec<f64>> {
    const IRR: [f64; 6] = [
        0.414_213_562_373_095,
        0.732_050_807_568_877,
        0.236_067_977_499_79,
        0.645_751_311_064_591,
        0.316_624_790_355_4,
        0.605_551_275_463_989,
    ];
    (1..=count)
        .map(|i| {
            (0..n)
                .map(|j| 2.0 * PI * ((i as f64 * IRR[j % IRR.len()] + 0.1 * j as f64).fract()))
                .collect()
        })
        .collect()
}

fn real_point(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

fn max_degree(series: &[PeriodicSeries]) -> usize {
    series.iter().map(|s| s.degree()).max().unwrap_or(0)
}

fn widen_all(series: Vec<PeriodicSeries>) -> Vec<PeriodicSeries> {
    let d = max_degree(&series);
    series.into_iter().map(|s| s.widened(d)).collect()
}

/// Determinant of a small complex matrix by Gaussian elimination with
/// partial pivoting.
pub fn det_complex(mut a: Vec<Vec<Complex64>>) -> Complex64 {
    let n = a.len();
    let mut det = Complex64::new(1.0, 0.0);
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].norm().total_cmp(&a[j][c].norm()))
            .unwrap_or(c);
        if a[p][c] == ZERO {
            return ZERO;
        }
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        let piv = a[c][c];
        det *= piv;
        for r in c + 1..n {
            let f = a[r][c] / piv;
            if f != ZERO {
                for k in c..n {
                    let v = a[c][k];
                    a[r][k] -= f * v;
                }
            }
        }
    }
    det
}

fn int_det(a: &[Vec<i64>]) -> i64 {
    let n = a.len();
    match n {
        0 => 1,
        1 => a[0][0],
        _ => (0..n)
            .map(|c| {
                let minor: Vec<Vec<i64>> = a[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|(k, _)| *k != c)
                            .map(|(_, v)| *v)
                            .collect()
                    })
                    .collect();
                let s = if c % 2 == 0 { 1 } else { -1 };
                s * a[0][c] * int_det(&minor)
            })
            .sum(),
    }
}

fn identity_matrix(n: usize) -> Vec<Vec<i64>> {
    (0..n)
        .map(|i| (0..n).map(|j| i64::from(i == j)).collect())
        .collect()
}

fn mat_mul(a: &[Vec<i64>], b: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|l| a[i][l] * b[l][j]).sum()).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Vector fields

/// `dθ_j/dt = p_j(θ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FieldJson", into = "FieldJson")]
pub struct PeriodicVectorField {
    components: Vec<PeriodicSeries>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldJson {
    components: Vec<PeriodicSeries>,
}

impl TryFrom<FieldJson> for PeriodicVectorField {
    type Error = Error;
    fn try_from(j: FieldJson) -> Result<Self> {
        PeriodicVectorField::new(j.components)
    }
}

impl From<PeriodicVectorField> for FieldJson {
    fn from(v: PeriodicVectorField) -> Self {
        FieldJson {
            components: v.components,
        }
    }
}

impl PeriodicVectorField {
    /// Components are widened to a common degree bound.
    pub fn new(components: Vec<PeriodicSeries>) -> Result<Self> {
        let n = components.len();
        if n == 0 {
            return Err(Error::InvalidInput("vector field needs components".into()));
        }
        for c in &components {
            check_dim(n, c.dim())?;
        }
        Ok(PeriodicVectorField {
            components: widen_all(components),
        })
    }

    pub fn zeros(n: usize, degree: usize) -> Self {
        PeriodicVectorField {
            components: vec![PeriodicSeries::zeros(n, degree); n],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn degree(&self) -> usize {
        self.components[0].degree()
    }

    pub fn components(&self) -> &[PeriodicSeries] {
        &self.components
    }

    pub fn is_real(&self) -> bool {
        self.components.iter().all(|c| c.is_real())
    }

    /// `max_j ‖p_j‖_r` with the coefficient norm.
    pub fn norm(&self, r: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.coeff_norm(r))
            .fold(0.0, f64::max)
    }

    /// `Σ_j D_j p_j`.
    pub fn divergence(&self) -> PeriodicSeries {
        let mut acc = self.components[0].derivative(0);
        for (j, c) in self.components.iter().enumerate().skip(1) {
            acc = &acc + &c.derivative(j);
        }
        acc
    }

    pub fn scale(&self, a: f64) -> Self {
        PeriodicVectorField {
            components: self.components.iter().map(|c| c.scale_real(a)).collect(),
        }
    }
}

/// `divergence(v)` as a free function.
pub fn divergence(v: &PeriodicVectorField) -> PeriodicSeries {
    v.divergence()
}

// ---------------------------------------------------------------------------
// Torus maps

/// `θ′_k = Σ_l d_{kl} θ_l + f_k(θ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapJson", into = "MapJson")]
pub struct TorusMapLift {
    matrix: Vec<Vec<i64>>,
    parts: Vec<PeriodicSeries>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapJson {
    matrix: Vec<Vec<i64>>,
    parts: Vec<PeriodicSeries>,
}

impl TryFrom<MapJson> for TorusMapLift {
    type Error = Error;
    fn try_from(j: MapJson) -> Result<Self> {
        TorusMapLift::new(j.matrix, j.parts)
    }
}

impl From<TorusMapLift> for MapJson {
    fn from(m: TorusMapLift) -> Self {
        MapJson {
            matrix: m.matrix,
            parts: m.parts,
        }
    }
}

impl TorusMapLift {
    /// Parts are widened to a common degree bound.
    pub fn new(matrix: Vec<Vec<i64>>, parts: Vec<PeriodicSeries>) -> Result<Self> {
        let n = parts.len();
        if n == 0 {
            return Err(Error::InvalidInput("map needs at least one part".into()));
        }
        check_dim(n, matrix.len())?;
        for row in &matrix {
            check_dim(n, row.len())?;
        }
        for p in &parts {
            check_dim(n, p.dim())?;
        }
        Ok(TorusMapLift {
            matrix,
            parts: widen_all(parts),
        })
    }

    /// Identity integer part with the given periodic parts.
    pub fn from_parts(parts: Vec<PeriodicSeries>) -> Result<Self> {
        let n = parts.len();
        Self::new(identity_matrix(n), parts)
    }

    pub fn identity(n: usize, degree: usize) -> Self {
        TorusMapLift {
            matrix: identity_matrix(n),
            parts: vec![PeriodicSeries::zeros(n, degree); n],
        }
    }

    /// `θ ↦ θ + s`.
    pub fn translation(shift: &[f64], degree: usize) -> Self {
        let n = shift.len();
        let parts = shift
            .iter()
            .map(|&s| PeriodicSeries::constant(n, degree, Complex64::new(s, 0.0)))
            .collect();
        TorusMapLift {
            matrix: identity_matrix(n),
            parts,
        }
    }

    /// Pure integer-linear map `θ ↦ Dθ`.
    pub fn linear(matrix: Vec<Vec<i64>>, degree: usize) -> Result<Self> {
        let n = matrix.len();
        Self::new(matrix, vec![PeriodicSeries::zeros(n, degree); n])
    }

    pub fn dim(&self) -> usize {
        self.parts.len()
    }

    pub fn degree(&self) -> usize {
        self.parts[0].degree()
    }

    pub fn matrix(&self) -> &[Vec<i64>] {
        &self.matrix
    }

    pub fn parts(&self) -> &[PeriodicSeries] {
        &self.parts
    }

    pub fn into_parts(self) -> Vec<PeriodicSeries> {
        self.parts
    }

    pub fn is_real(&self) -> bool {
        self.parts.iter().all(|p| p.is_real())
    }

    pub fn has_identity_matrix(&self) -> bool {
        self.matrix == identity_matrix(self.dim())
    }

    /// `det D`, the degree of the torus map.
    pub fn integer_det(&self) -> i64 {
        int_det(&self.matrix)
    }

    /// `max_k ‖f_k‖_r`.
    pub fn displacement_norm(&self, r: f64) -> f64 {
        self.parts
            .iter()
            .map(|p| p.coeff_norm(r))
            .fold(0.0, f64::max)
    }

    pub fn resize(&self, degree: usize) -> (Self, f64) {
        let mut dropped = 0.0;
        let parts = self
            .parts
            .iter()
            .map(|p| {
                let (s, d) = p.resize(degree);
                dropped += d;
                s
            })
            .collect();
        (
            TorusMapLift {
                matrix: self.matrix.clone(),
                parts,
            },
            dropped,
        )
    }

    /// Inverse of a pure integer-linear map with `det D = ±1`.
    pub fn inverse_linear(&self) -> Result<Self> {
        if self.parts.iter().any(|p| !p.is_zero()) {
            return Err(Error::InvalidInput(
                "inverse_linear needs a map without periodic part".into(),
            ));
        }
        let det = self.integer_det();
        if det.abs() != 1 {
            return Err(Error::hypothesis(Bound::Unimodular, format!("det D = {det}")));
        }
        let n = self.dim();
        let mut inv = vec![vec![0i64; n]; n];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                // adjugate entry (i, j) is the (j, i) cofactor
                let minor: Vec<Vec<i64>> = (0..n)
                    .filter(|&r| r != j)
                    .map(|r| (0..n).filter(|&c| c != i).map(|c| self.matrix[r][c]).collect())
                    .collect();
                let sign = if (i + j) % 2 == 0 { 1 } else { -1 };
                *slot = sign * int_det(&minor) * det;
            }
        }
        Self::linear(inv, self.degree())
    }

    /// `φ̃(θ)` at a complex point.
    pub fn eval(&self, theta: &[Complex64]) -> Result<Vec<Complex64>> {
        check_dim(self.dim(), theta.len())?;
        let mut ev = MapEvaluator::new(self);
        Ok(ev.value(theta))
    }
}

/// Repeated evaluation of a map and its Jacobian at arbitrary points.
#[derive(Clone, Debug)]
pub struct MapEvaluator {
    map: TorusMapLift,
    jac: Vec<Vec<PeriodicSeries>>,
    ev: PointEvaluator,
}

impl MapEvaluator {
    pub fn new(map: &TorusMapLift) -> Self {
        let n = map.dim();
        let jac = map
            .parts
            .iter()
            .map(|p| (0..n).map(|l| p.derivative(l)).collect())
            .collect();
        MapEvaluator {
            map: map.clone(),
            jac,
            ev: PointEvaluator::new(n, map.degree()),
        }
    }

    pub fn value(&mut self, theta: &[Complex64]) -> Vec<Complex64> {
        self.ev.set_point(theta);
        let m = &self.map;
        (0..m.dim())
            .map(|k| {
                let lin: Complex64 = m.matrix[k]
                    .iter()
                    .zip(theta)
                    .map(|(d, x)| x * *d as f64)
                    .sum();
                lin + self.ev.eval(&m.parts[k])
            })
            .collect()
    }

    /// `D + D_θ f` at `θ`.
    pub fn jacobian(&mut self, theta: &[Complex64]) -> Vec<Vec<Complex64>> {
        self.ev.set_point(theta);
        let n = self.map.dim();
        (0..n)
            .map(|k| {
                (0..n)
                    .map(|l| Complex64::new(self.map.matrix[k][l] as f64, 0.0) + self.ev.eval(&self.jac[k][l]))
                    .collect()
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Flows

/// Knobs for [`flow_with`].
#[derive(Clone, Debug)]
pub struct FlowOptions {
    /// Degree bound of the re-expanded displacement; defaults to the field's.
    pub degree: Option<usize>,
    /// Grid points per axis are `oversample · (2N + 1)`.
    pub oversample: usize,
    /// Largest acceptable verification defect.
    pub defect_tol: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            degree: None,
            oversample: 1,
            defect_tol: FLOW_DEFECT_TOL,
        }
    }
}

/// Time-`t` map of a vector field.
#[derive(Clone, Debug)]
pub struct FlowResult {
    /// `θ ↦ θ + f(θ, t)`.
    pub map: TorusMapLift,
    pub t: f64,
    pub step_count: usize,
    /// Largest deviation between the re-expanded map and a refined direct
    /// integration at off-grid probe points.
    pub defect: f64,
    /// ℓ¹ mass lost when re-expanding the grid values.
    pub dropped: f64,
    /// `∫₀ᵗ σ∘φ_s ds` for the integrand passed to [`flow_with`], if any.
    pub integral: Option<PeriodicSeries>,
}

struct Integrator<'a> {
    n: usize,
    series: Vec<&'a PeriodicSeries>,
    degree: usize,
    t: f64,
}

enum Eval<'a> {
    Jet(&'a Jet, usize),
    Direct,
}

struct Scratch {
    ev: PointEvaluator,
    mono: Vec<Complex64>,
    z: Vec<Complex64>,
    y: Vec<Complex64>,
    k: [Vec<Complex64>; 4],
    tmp: Vec<Complex64>,
}

impl<'a> Integrator<'a> {
    fn scratch(&self) -> Scratch {
        let w = self.series.len();
        Scratch {
            ev: PointEvaluator::new(self.n, self.degree),
            mono: Vec::new(),
            z: vec![ZERO; self.n],
            y: vec![ZERO; w],
            k: [vec![ZERO; w], vec![ZERO; w], vec![ZERO; w], vec![ZERO; w]],
            tmp: vec![ZERO; w],
        }
    }

    /// Evaluates the right-hand side at displacement `s.tmp[..n]` into `s.k[slot]`.
    fn rhs(&self, how: &Eval<'_>, s: &mut Scratch, base: &[f64], out_slot: usize) {
        let n = self.n;
        match how {
            Eval::Jet(jet, idx) => {
                jet.monomials(&s.tmp[..n], &mut s.mono);
                jet.eval_into(*idx, &s.mono, &mut s.k[out_slot]);
            }
            Eval::Direct => {
                for j in 0..n {
                    s.z[j] = s.tmp[j] + base[j];
                }
                s.ev.set_point(&s.z);
                for (o, h) in s.k[out_slot].iter_mut().zip(&self.series) {
                    *o = s.ev.eval(h);
                }
            }
        }
    }

    /// RK4 for the displacement `f` (and the running integral), returning the
    /// final state and the largest stage displacement seen.
    fn run(&self, how: Eval<'_>, s: &mut Scratch, base: &[f64], steps: usize) -> (Vec<Complex64>, f64) {
        let w = self.series.len();
        let h = self.t / steps as f64;
        for v in s.y.iter_mut() {
            *v = ZERO;
        }
        let mut reach: f64 = 0.0;
        for _ in 0..steps {
            for (stage, coef) in [(0usize, 0.0), (1, 0.5), (2, 0.5), (3, 1.0)] {
                for i in 0..w {
                    s.tmp[i] = if stage == 0 {
                        s.y[i]
                    } else {
                        s.y[i] + s.k[stage - 1][i] * (h * coef)
                    };
                }
                for i in 0..self.n {
                    reach = reach.max(s.tmp[i].norm());
                }
                self.rhs(&how, s, base, stage);
            }
            for i in 0..w {
                s.y[i] += (s.k[0][i] + s.k[1][i] * 2.0 + s.k[2][i] * 2.0 + s.k[3][i]) * (h / 6.0);
            }
        }
        for i in 0..self.n {
            reach = reach.max(s.y[i].norm());
        }
        (s.y.clone(), reach)
    }
}

/// A priori radius of the displacement over `|t|`: the smallest `F` found by
/// iterating `F ← |t| max_j ‖p_j‖_F`, padded.
fn displacement_radius(components: &[PeriodicSeries], t: f64) -> Option<f64> {
    let mut f = t.abs() * components.iter().map(|c| c.coeff_norm(0.0)).fold(0.0, f64::max);
    for _ in 0..4 {
        if !(f < 0.5) {
            return None;
        }
        f = t.abs() * components.iter().map(|c| c.coeff_norm(f)).fold(0.0, f64::max);
    }
    Some(1.25 * f)
}

/// Time-`t` flow with default options and no integrand.
pub fn flow(v: &PeriodicVectorField, t: f64, r1: f64, delta: f64) -> Result<FlowResult> {
    flow_with(v, t, r1, delta, None, &FlowOptions::default())
}

/// Time-`t` flow of `v`, optionally integrating `σ` along trajectories.
///
/// Integrates the displacement `f(θ₀, t)` with fixed-step RK4 from every point
/// of a real grid and re-expands it. Refuses unless `‖p‖_{r₁} ≤ r₁δ`.
pub fn flow_with(
    v: &PeriodicVectorField,
    t: f64,
    r1: f64,
    delta: f64,
    integrand: Option<&PeriodicSeries>,
    opts: &FlowOptions,
) -> Result<FlowResult> {
    let n = v.dim();
    if !(t.abs() <= 1.0) {
        return Err(Error::hypothesis(Bound::TimeRange, format!("t = {t}")));
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::hypothesis(Bound::DeltaRange, format!("δ = {delta}, need 0 < δ < 1/2")));
    }
    check_strip(r1)?;
    if let Some(s) = integrand {
        check_dim(n, s.dim())?;
    }
    let pn = v.norm(r1);
    if pn > r1 * delta {
        return Err(Error::hypothesis(
            Bound::Z1,
            format!("‖p‖_{{r₁}} = {pn:.6e} > r₁δ = {:.6e}", r1 * delta),
        ));
    }
    let steps = MIN_STEPS.max((8.0 * pn / (r1 * delta)).ceil() as usize);
    let degree = opts.degree.unwrap_or(v.degree()).max(v.degree());
    let grid = Grid::for_degree(n, degree, opts.oversample);

    let mut series: Vec<&PeriodicSeries> = v.components().iter().collect();
    if let Some(s) = integrand {
        series.push(s);
    }
    let eval_degree = series.iter().map(|s| s.degree()).max().unwrap_or(0);
    let integ = Integrator {
        n,
        series,
        degree: eval_degree,
        t,
    };
    let real = v.is_real() && integrand.map_or(true, |s| s.is_real());

    let radius = displacement_radius(v.components(), t);
    let order = radius.and_then(|r| jet::choose_order(&integ.series, r));
    let run_grid = |jet: Option<&Jet>| -> Vec<(Vec<Complex64>, f64)> {
        exec::map_range_with(
            grid.len(),
            || (integ.scratch(), vec![0.0; n]),
            |(s, base), idx| {
                grid.point_into(idx, base);
                let how = match jet {
                    Some(j) => Eval::Jet(j, idx),
                    None => Eval::Direct,
                };
                integ.run(how, s, base, steps)
            },
        )
    };
    let mut states = match (radius, order) {
        (Some(rad), Some(order)) => {
            let jet = Jet::new(&grid, &integ.series, order);
            let st = run_grid(Some(&jet));
            if st.iter().any(|(_, reach)| *reach > rad) {
                log::debug!("flow left the jet radius; falling back to direct evaluation");
                run_grid(None)
            } else {
                st
            }
        }
        _ => run_grid(None),
    };

    let mut dropped = 0.0;
    let mut parts = Vec::with_capacity(n);
    for j in 0..n {
        let vals: Vec<Complex64> = states.iter().map(|(y, _)| y[j]).collect();
        let e = grid.expand(&vals, degree, real);
        dropped += e.dropped;
        parts.push(e.series);
    }
    let integral = integrand.map(|s| {
        let vals: Vec<Complex64> = states.iter().map(|(y, _)| y[n]).collect();
        let e = grid.expand(&vals, degree, real && s.is_real());
        dropped += e.dropped;
        e.series
    });
    states.clear();
    let map = TorusMapLift::from_parts(parts)?;

    // refined direct integration at probe points
    let mut s = integ.scratch();
    let mut mev = MapEvaluator::new(&map);
    let mut iev = PointEvaluator::new(n, degree);
    let mut defect: f64 = 0.0;
    for p in probe_points(n, 6) {
        let (y, _) = integ.run(Eval::Direct, &mut s, &p, 2 * steps);
        let z = real_point(&p);
        let img = mev.value(&z);
        for j in 0..n {
            defect = defect.max((img[j] - z[j] - y[j]).norm());
        }
        if let Some(l) = &integral {
            iev.set_point(&z);
            defect = defect.max((iev.eval(l) - y[n]).norm());
        }
    }
    if !(defect <= opts.defect_tol) {
        return Err(Error::numerical(
            "flow",
            format!("verification defect {defect:.3e} exceeds {:.1e}", opts.defect_tol),
        ));
    }
    Ok(FlowResult {
        map,
        t,
        step_count: steps,
        defect,
        dropped,
        integral,
    })
}

/// `log det Dφ_t = ∫₀ᵗ (div p)∘φ_s ds`.
pub fn log_det_jacobian(v: &PeriodicVectorField, t: f64, r1: f64, delta: f64) -> Result<PeriodicSeries> {
    let sigma = v.divergence();
    let res = flow_with(v, t, r1, delta, Some(&sigma), &FlowOptions::default())?;
    Ok(res.integral.expect("integrand supplied"))
}

// ---------------------------------------------------------------------------
// Inversion and composition

/// Output of [`invert_map`].
#[derive(Clone, Debug)]
pub struct Inversion {
    pub map: TorusMapLift,
    /// `max |φ(φ⁻¹(θ)) − θ|` at off-grid probe points.
    pub residual: f64,
    /// Largest per-point iteration count.
    pub iterations: usize,
    pub dropped: f64,
}

/// Inverse of a near-identity map with the degree of `φ`.
pub fn invert_map(phi: &TorusMapLift, r: f64) -> Result<Inversion> {
    invert_map_with(phi, r, phi.degree())
}

/// Inverse of `θ ↦ θ + f(θ)` by the contraction `u ← −f(θ + u)` at every grid
/// point, re-expanded to `degree`. Refuses unless `‖f‖_r ≤ r/(4n)`.
pub fn invert_map_with(phi: &TorusMapLift, r: f64, degree: usize) -> Result<Inversion> {
    if !phi.has_identity_matrix() {
        return Err(Error::InvalidInput(
            "invert_map needs an identity integer part".into(),
        ));
    }
    check_strip(r)?;
    let n = phi.dim();
    let fnorm = phi.displacement_norm(r);
    if fnorm > r / (4.0 * n as f64) {
        return Err(Error::hypothesis(
            Bound::Nf,
            format!("‖f‖_r = {fnorm:.6e} > r/(4n) = {:.6e}", r / (4.0 * n as f64)),
        ));
    }
    let degree = degree.max(phi.degree());
    let grid = Grid::for_degree(n, degree, 1);
    let parts: Vec<&PeriodicSeries> = phi.parts().iter().collect();
    let radius = displacement_radius(phi.parts(), 1.0);
    let jet = radius
        .and_then(|rad| jet::choose_order(&parts, rad).map(|o| (rad, Jet::new(&grid, &parts, o))));

    let solve = |base: &[f64], idx: usize, jet: Option<&Jet>, ev: &mut PointEvaluator, mono: &mut Vec<Complex64>| {
        let mut u = vec![ZERO; n];
        let mut next = vec![ZERO; n];
        let mut z = vec![ZERO; n];
        let mut prev_step = f64::INFINITY;
        let mut reach: f64 = 0.0;
        for it in 1..=INVERT_MAX_ITER {
            match jet {
                Some(j) => {
                    j.monomials(&u, mono);
                    j.eval_into(idx, mono, &mut next);
                }
                None => {
                    for k in 0..n {
                        z[k] = u[k] + base[k];
                    }
                    ev.set_point(&z);
                    for (o, p) in next.iter_mut().zip(&parts) {
                        *o = ev.eval(p);
                    }
                }
            }
            let mut step: f64 = 0.0;
            for k in 0..n {
                let nu = -next[k];
                step = step.max((nu - u[k]).norm());
                u[k] = nu;
                reach = reach.max(nu.norm());
            }
            if step <= INVERT_TOL {
                return Ok((u, it, reach));
            }
            if it > 3 && step >= prev_step {
                return Err(step / prev_step);
            }
            prev_step = step;
        }
        Err(1.0)
    };

    type Solved = std::result::Result<(Vec<Complex64>, usize, f64), f64>;
    let run = |jet: Option<&Jet>| -> Vec<Solved> {
        exec::map_range_with(
            grid.len(),
            || (vec![0.0; n], PointEvaluator::new(n, phi.degree()), Vec::new()),
            |(base, ev, mono), idx| {
                grid.point_into(idx, base);
                solve(base, idx, jet, ev, mono)
            },
        )
    };
    let mut sols = match &jet {
        Some((rad, j)) => {
            let s = run(Some(j));
            if s.iter().any(|x| matches!(x, Ok((_, _, reach)) if reach > rad)) {
                run(None)
            } else {
                s
            }
        }
        None => run(None),
    };
    let mut iterations = 0;
    let mut columns = vec![Vec::with_capacity(grid.len()); n];
    for s in sols.drain(..) {
        match s {
            Ok((u, it, _)) => {
                iterations = iterations.max(it);
                for (c, v) in columns.iter_mut().zip(u) {
                    c.push(v);
                }
            }
            Err(ratio) => {
                return Err(Error::numerical(
                    "invert_map",
                    format!("fixed-point iteration is not contracting (ratio {ratio:.3})"),
                ))
            }
        }
    }
    let mut dropped = 0.0;
    let inv_parts = columns
        .iter()
        .map(|vals| {
            let e = grid.expand(vals, degree, phi.is_real());
            dropped += e.dropped;
            e.series
        })
        .collect();
    let map = TorusMapLift::from_parts(inv_parts)?;
    let residual = round_trip_residual(phi, &map, &probe_points(n, 8));
    Ok(Inversion {
        map,
        residual,
        iterations,
        dropped,
    })
}

/// `max |φ(ψ(θ)) − θ|` over the given real points.
pub fn round_trip_residual(phi: &TorusMapLift, psi: &TorusMapLift, points: &[Vec<f64>]) -> f64 {
    let mut a = MapEvaluator::new(phi);
    let mut b = MapEvaluator::new(psi);
    points
        .iter()
        .map(|p| {
            let z = real_point(p);
            let img = a.value(&b.value(&z));
            img.iter().zip(&z).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// `φ ∘ ψ` with periodic parts re-expanded to `degree`.
pub fn compose_maps(phi: &TorusMapLift, psi: &TorusMapLift, degree: usize) -> Result<TorusMapLift> {
    let n = phi.dim();
    check_dim(n, psi.dim())?;
    let matrix = mat_mul(&phi.matrix, &psi.matrix);
    // D_φ · g_ψ
    let mut lin_parts: Vec<PeriodicSeries> = Vec::with_capacity(n);
    for k in 0..n {
        let mut acc = PeriodicSeries::zeros(n, psi.degree());
        for l in 0..n {
            let d = phi.matrix[k][l];
            if d != 0 {
                acc = &acc + &psi.parts[l].scale_real(d as f64);
            }
        }
        if psi.is_real() {
            acc = acc.into_real()?;
        }
        lin_parts.push(acc.resize(degree).0);
    }
    if phi.parts.iter().all(|p| p.is_zero()) {
        return TorusMapLift::new(matrix, lin_parts);
    }
    let grid = Grid::for_degree(n, degree.max(phi.degree()).max(psi.degree()), 2);
    let disp: Vec<Vec<Complex64>> = psi.parts.iter().map(|p| grid.sample(p)).collect();
    let targets: Vec<&PeriodicSeries> = phi.parts.iter().collect();
    let vals = jet::pullback_on_grid(&targets, &psi.matrix, &disp, &grid);
    let real = phi.is_real() && psi.is_real();
    let mut dropped = 0.0;
    let parts = vals
        .iter()
        .zip(lin_parts)
        .map(|(v, lin)| {
            let e = grid.expand(v, degree, real);
            dropped += e.dropped;
            &e.series + &lin
        })
        .collect();
    log::trace!("compose_maps dropped mass {dropped:.3e}");
    TorusMapLift::new(matrix, parts)
}

/// Central-difference Jacobian determinant of `φ̃` at a real point.
pub fn finite_difference_det(phi: &TorusMapLift, theta: &[f64], h: f64) -> Complex64 {
    let n = phi.dim();
    let mut ev = MapEvaluator::new(phi);
    let mut jac = vec![vec![ZERO; n]; n];
    for l in 0..n {
        let mut plus = real_point(theta);
        let mut minus = plus.clone();
        plus[l] += h;
        minus[l] -= h;
        let a = ev.value(&plus);
        let b = ev.value(&minus);
        for k in 0..n {
            jac[k][l] = (a[k] - b[k]) / (2.0 * h);
        }
    }
    det_complex(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn zero_field_flows_to_identity() {
        let v = PeriodicVectorField::zeros(2, 3);
        let res = flow(&v, 1.0, 0.5, 0.25).unwrap();
        assert!(res.map.parts().iter().all(|p| p.is_zero()));
        assert_eq!(res.step_count, MIN_STEPS);
    }

    #[test]
    fn constant_field_translates() {
        let cst = 0.01;
        let v = PeriodicVectorField::new(vec![
            PeriodicSeries::constant(2, 2, c(cst)),
            PeriodicSeries::zeros(2, 2),
        ])
        .unwrap();
        let res = flow(&v, -0.75, 0.5, 0.25).unwrap();
        assert!((res.map.parts()[0].mean() - c(-0.75 * cst)).norm() < 1e-15);
        assert!(res.map.parts()[1].is_zero());
    }

    #[test]
    fn shear_field_is_affine_in_time() {
        let eps = 1e-2;
        let v = PeriodicVectorField::new(vec![
            PeriodicSeries::sine(2, 3, &[0, 1], eps).unwrap(),
            PeriodicSeries::zeros(2, 3),
        ])
        .unwrap();
        let t = 0.6;
        let res = flow(&v, t, 0.5, 0.1).unwrap();
        let expect = v.components()[0].scale_real(t);
        assert!((&res.map.parts()[0] - &expect).coeff_norm(0.0) < 1e-15);
        assert!(res.map.parts()[1].coeff_norm(0.0) < 1e-15);
    }

    #[test]
    fn flow_refuses_large_fields() {
        let v = PeriodicVectorField::new(vec![PeriodicSeries::constant(1, 1, c(1.0))]).unwrap();
        assert_eq!(flow(&v, 1.0, 0.5, 0.25).unwrap_err().bound(), Some(Bound::Z1));
        assert_eq!(flow(&v, 1.5, 0.5, 0.25).unwrap_err().bound(), Some(Bound::TimeRange));
        assert_eq!(flow(&v, 1.0, 0.5, 0.5).unwrap_err().bound(), Some(Bound::DeltaRange));
    }

    #[test]
    fn divergence_examples() {
        let s2 = PeriodicVectorField::new(vec![
            PeriodicSeries::sine(2, 2, &[0, 1], 1.0).unwrap(),
            PeriodicSeries::zeros(2, 2),
        ])
        .unwrap();
        assert!(s2.divergence().is_zero());
        let s1 = PeriodicVectorField::new(vec![
            PeriodicSeries::sine(2, 2, &[1, 0], 1.0).unwrap(),
            PeriodicSeries::zeros(2, 2),
        ])
        .unwrap();
        let cos1 = PeriodicSeries::cosine(2, 2, &[1, 0], 1.0).unwrap();
        assert!((&s1.divergence() - &cos1).coeff_norm(0.0) < 1e-15);
    }

    #[test]
    fn log_det_matches_finite_differences() {
        // one-dimensional flow of 0.1 sin θ: the Jacobian is the derivative of the map
        let v = PeriodicVectorField::new(vec![PeriodicSeries::sine(1, 1, &[1], 0.1).unwrap()]).unwrap();
        let sigma = v.divergence();
        let opts = FlowOptions {
            degree: Some(40),
            ..FlowOptions::default()
        };
        let res = flow_with(&v, 1.0, 0.5, 0.45, Some(&sigma), &opts).unwrap();
        let l = res.integral.unwrap();
        for p in probe_points(1, 5) {
            let fd = finite_difference_det(&res.map, &p, 1e-5);
            let ld = l.eval_real_point(&p).unwrap();
            assert!((ld.exp() - fd).norm() < 1e-6, "{ld} vs {fd}");
        }
        let zero = log_det_jacobian(&v, 0.0, 0.5, 0.45).unwrap();
        assert!(zero.coeff_norm(0.0) < 1e-15);
    }

    #[test]
    fn divergence_free_flow_has_zero_log_det() {
        let v = PeriodicVectorField::new(vec![
            PeriodicSeries::cosine(2, 3, &[0, 2], 0.01).unwrap(),
            PeriodicSeries::sine(2, 3, &[1, 0], 0.02).unwrap(),
        ])
        .unwrap();
        assert!(v.divergence().is_zero());
        let sigma = v.divergence();
        let opts = FlowOptions {
            degree: Some(16),
            ..FlowOptions::default()
        };
        let res = flow_with(&v, -1.0, 0.5, 0.2, Some(&sigma), &opts).unwrap();
        assert!(res.integral.unwrap().coeff_norm(0.0) < 1e-10);
        for p in probe_points(2, 4) {
            let fd = finite_difference_det(&res.map, &p, 1e-5);
            assert!((fd - 1.0).norm() < 1e-8);
        }
    }

    #[test]
    fn invert_examples() {
        let id = TorusMapLift::identity(2, 3);
        let inv = invert_map(&id, 0.5).unwrap();
        assert!(inv.map.parts().iter().all(|p| p.coeff_norm(0.0) < 1e-15));

        let tr = TorusMapLift::translation(&[0.05, 0.0], 2);
        let inv = invert_map(&tr, 0.5).unwrap();
        assert!((inv.map.parts()[0].mean() - c(-0.05)).norm() < 1e-13);

        let big = TorusMapLift::translation(&[0.2, 0.0], 2);
        assert_eq!(invert_map(&big, 0.5).unwrap_err().bound(), Some(Bound::Nf));
    }

    #[test]
    fn shear_composed_with_its_inverse() {
        let shear = TorusMapLift::linear(vec![vec![1, 1], vec![0, 1]], 2).unwrap();
        let inv = shear.inverse_linear().unwrap();
        assert_eq!(inv.matrix(), &[vec![1, -1], vec![0, 1]]);
        let prod = compose_maps(&shear, &inv, 2).unwrap();
        assert!(prod.has_identity_matrix());
        assert!(prod.parts().iter().all(|p| p.is_zero()));
    }

    #[test]
    fn det_complex_small_cases() {
        let a = vec![vec![c(2.0), c(1.0)], vec![c(1.0), c(3.0)]];
        assert!((det_complex(a) - c(5.0)).norm() < 1e-15);
        let p = vec![vec![c(0.0), c(1.0)], vec![c(1.0), c(0.0)]];
        assert!((det_complex(p) - c(-1.0)).norm() < 1e-15);
    }

    #[test]
    fn map_json_round_trip() {
        let m = TorusMapLift::new(
            vec![vec![1, 1], vec![0, 1]],
            vec![
                PeriodicSeries::sine(2, 2, &[1, 1], 0.1).unwrap(),
                PeriodicSeries::zeros(2, 1),
            ],
        )
        .unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: TorusMapLift = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.degree(), 2);
    }
}
