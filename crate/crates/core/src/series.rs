//! Truncated multivariate Fourier series on the torus.
//!
//! A [`PeriodicSeries`] stores `h(θ) = Σ_k c_k e^{i⟨k,θ⟩}` for all multi-indices
//! with `|k_j| ≤ N` densely. The same type carries Laurent data on annuli via
//! `z_j = e^{iθ_j}`: the Laurent exponent of `z_j` is the Fourier index `k_j`.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_strip, Bound, Error, Result};
use crate::exec;
use crate::flows::TorusMapLift;
use crate::grid::Grid;
use crate::jet;

/// Absolute tolerance for zero-mean and reality preconditions.
pub const COEFF_TOL: f64 = 1e-12;

/// Oversampling factor for grid composition.
pub const COMPOSE_OVERSAMPLE: usize = 2;

/// Oversampling factor for pointwise maps and quotients. The caller's degree
/// bound already has to cover the result, so aliasing only folds the tail
/// that truncation drops anyway.
pub const POINTWISE_OVERSAMPLE: usize = 1;

/// Grid budget of [`PeriodicSeries::map_pointwise_adaptive`].
const MAX_ADAPTIVE_POINTS: f64 = 4.0e6;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Frequency exponents `(k₁, …, k_n)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(pub Vec<i32>);

impl MultiIndex {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l1(&self) -> u32 {
        self.0.iter().map(|k| k.unsigned_abs()).sum()
    }

    pub fn max_abs(&self) -> u32 {
        self.0.iter().map(|k| k.unsigned_abs()).max().unwrap_or(0)
    }
}

impl From<Vec<i32>> for MultiIndex {
    fn from(v: Vec<i32>) -> Self {
        MultiIndex(v)
    }
}

/// The strip `S_r = {|Im θ_j| < r}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StripDomain {
    r: f64,
    n: usize,
}

impl StripDomain {
    pub fn new(n: usize, r: f64) -> Result<Self> {
        check_strip(r)?;
        Ok(StripDomain { r, n })
    }

    pub fn width(&self) -> f64 {
        self.r
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

/// Two estimates of `sup_{S_r} |h|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    /// `Σ_k |c_k| e^{r Σ_j |k_j|}`, a true majorant.
    pub coeff_bound: f64,
    /// Largest `|h|` found on a grid of the distinguished boundary `Im θ_j = ±r`.
    pub sampled_sup: f64,
}

/// Truncated Fourier series in `n` angles with uniform per-axis degree `N`.
#[derive(Clone, PartialEq)]
pub struct PeriodicSeries {
    n: usize,
    degree: usize,
    real: bool,
    coeffs: Vec<Complex64>,
}

impl fmt::Debug for PeriodicSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<_> = self
            .terms()
            .map(|(k, c)| format!("{:?}: {:.3e}{:+.3e}i", k.0, c.re, c.im))
            .collect();
        f.debug_struct("PeriodicSeries")
            .field("n", &self.n)
            .field("N", &self.degree)
            .field("real", &self.real)
            .field("terms", &terms)
            .finish()
    }
}

impl PeriodicSeries {
    pub fn zeros(n: usize, degree: usize) -> Self {
        assert!(n >= 1, "series need at least one angle");
        let w = 2 * degree + 1;
        PeriodicSeries {
            n,
            degree,
            real: true,
            coeffs: vec![ZERO; w.pow(n as u32)],
        }
    }

    pub fn constant(n: usize, degree: usize, c: Complex64) -> Self {
        let mut s = Self::zeros(n, degree);
        s.real = c.im == 0.0;
        let zero = vec![0; n];
        s.set_coeff(&zero, c);
        s
    }

    /// Builds a series from `(k, c_k)` pairs. Repeated indices are an error.
    /// The reality flag is set when the data satisfy the symmetry exactly.
    pub fn from_terms(n: usize, degree: usize, terms: &[(Vec<i32>, Complex64)]) -> Result<Self> {
        let mut s = Self::zeros(n, degree);
        let mut seen = vec![false; s.coeffs.len()];
        for (k, c) in terms {
            check_dim(n, k.len())?;
            let idx = s.index_of(k).ok_or_else(|| {
                Error::InvalidInput(format!("index {k:?} exceeds degree bound {degree}"))
            })?;
            if seen[idx] {
                return Err(Error::InvalidInput(format!("duplicate index {k:?}")));
            }
            seen[idx] = true;
            s.coeffs[idx] = *c;
        }
        s.real = s.reality_defect() == 0.0;
        Ok(s)
    }

    /// `amp · e^{i⟨k,θ⟩}`.
    pub fn monomial(n: usize, degree: usize, k: &[i32], amp: Complex64) -> Result<Self> {
        Self::from_terms(n, degree, &[(k.to_vec(), amp)])
    }

    /// `amp · cos⟨k,θ⟩`.
    pub fn cosine(n: usize, degree: usize, k: &[i32], amp: f64) -> Result<Self> {
        let neg: Vec<i32> = k.iter().map(|x| -x).collect();
        if neg == k {
            return Self::constant_checked(n, degree, amp);
        }
        Self::from_terms(
            n,
            degree,
            &[
                (k.to_vec(), Complex64::new(amp / 2.0, 0.0)),
                (neg, Complex64::new(amp / 2.0, 0.0)),
            ],
        )
    }

    /// `amp · sin⟨k,θ⟩`.
    pub fn sine(n: usize, degree: usize, k: &[i32], amp: f64) -> Result<Self> {
        let neg: Vec<i32> = k.iter().map(|x| -x).collect();
        if neg == k {
            return Ok(Self::zeros(n, degree));
        }
        Self::from_terms(
            n,
            degree,
            &[
                (k.to_vec(), Complex64::new(0.0, -amp / 2.0)),
                (neg, Complex64::new(0.0, amp / 2.0)),
            ],
        )
    }

    fn constant_checked(n: usize, degree: usize, c: f64) -> Result<Self> {
        Ok(Self::constant(n, degree, Complex64::new(c, 0.0)))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Flag: `h` is real on `ℝⁿ`.
    pub fn is_real(&self) -> bool {
        self.real
    }

    pub(crate) fn width(&self) -> usize {
        2 * self.degree + 1
    }

    pub(crate) fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub(crate) fn index_of(&self, k: &[i32]) -> Option<usize> {
        let w = self.width();
        let d = self.degree as i32;
        let mut idx = 0usize;
        for &kj in k {
            if kj.abs() > d {
                return None;
            }
            idx = idx * w + (kj + d) as usize;
        }
        Some(idx)
    }

    pub(crate) fn decode_into(&self, mut flat: usize, out: &mut [i32]) {
        let w = self.width();
        let d = self.degree as i32;
        for j in (0..self.n).rev() {
            out[j] = (flat % w) as i32 - d;
            flat /= w;
        }
    }

    pub fn multi_index(&self, flat: usize) -> MultiIndex {
        let mut k = vec![0; self.n];
        self.decode_into(flat, &mut k);
        MultiIndex(k)
    }

    /// `c_k`, zero outside the stored range.
    pub fn coeff(&self, k: &[i32]) -> Complex64 {
        if k.len() != self.n {
            return ZERO;
        }
        self.index_of(k).map_or(ZERO, |i| self.coeffs[i])
    }

    /// Sets `c_k`. Panics if `k` exceeds the degree bound. Clears the reality
    /// flag unless the value keeps the series symmetric.
    pub fn set_coeff(&mut self, k: &[i32], c: Complex64) {
        let idx = self
            .index_of(k)
            .unwrap_or_else(|| panic!("index {k:?} exceeds degree {}", self.degree));
        self.coeffs[idx] = c;
        if self.real {
            let neg: Vec<i32> = k.iter().map(|x| -x).collect();
            let partner = self.coeffs[self.index_of(&neg).expect("symmetric range")];
            if partner != c.conj() {
                self.real = false;
            }
        }
    }

    /// Nonzero terms in index order.
    pub fn terms(&self) -> impl Iterator<Item = (MultiIndex, Complex64)> + '_ {
        self.coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != ZERO)
            .map(|(i, c)| (self.multi_index(i), *c))
    }

    /// `max_k |c_{−k} − conj(c_k)|`.
    pub fn reality_defect(&self) -> f64 {
        let len = self.coeffs.len();
        (0..len)
            .map(|i| (self.coeffs[len - 1 - i] - self.coeffs[i].conj()).norm())
            .fold(0.0, f64::max)
    }

    /// Coefficient pairs violating the reality symmetry by more than `tol`.
    pub fn reality_violations(&self, tol: f64) -> Vec<(MultiIndex, MultiIndex, f64)> {
        let len = self.coeffs.len();
        (0..len / 2 + 1)
            .filter_map(|i| {
                let d = (self.coeffs[len - 1 - i] - self.coeffs[i].conj()).norm();
                (d > tol).then(|| (self.multi_index(i), self.multi_index(len - 1 - i), d))
            })
            .collect()
    }

    /// Sets the reality flag after checking the symmetry within [`COEFF_TOL`].
    pub fn into_real(mut self) -> Result<Self> {
        let d = self.reality_defect();
        if d > COEFF_TOL {
            return Err(Error::InvalidInput(format!(
                "series is not real on ℝⁿ: symmetry defect {d:.3e}"
            )));
        }
        self.project_real();
        Ok(self)
    }

    /// Drops the reality flag (the data are unchanged).
    pub fn into_complex(mut self) -> Self {
        self.real = false;
        self
    }

    /// Replaces the coefficients by the real part of the function:
    /// `c_k ← (c_k + conj c_{−k})/2`.
    pub(crate) fn project_real(&mut self) {
        let len = self.coeffs.len();
        for i in 0..=len / 2 {
            let j = len - 1 - i;
            let a = self.coeffs[i];
            let b = self.coeffs[j];
            let avg = (a + b.conj()) * 0.5;
            self.coeffs[i] = avg;
            self.coeffs[j] = avg.conj();
        }
        self.real = true;
    }

    /// Real part of the function on `ℝⁿ`, as a real series.
    pub fn real_part(&self) -> Self {
        let mut s = self.clone();
        s.project_real();
        s
    }

    /// Imaginary part of the function on `ℝⁿ`, as a real series.
    pub fn imag_part(&self) -> Self {
        let mut s = self.scale(-I);
        s.project_real();
        s
    }

    /// `conj(h(θ̄))`, the reflected series with coefficients `conj c_{−k}`.
    pub fn reflect_conj(&self) -> Self {
        let len = self.coeffs.len();
        let mut s = self.clone();
        for i in 0..len {
            s.coeffs[i] = self.coeffs[len - 1 - i].conj();
        }
        s
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| *c == ZERO)
    }

    /// Copy with degree bound `degree`, returning the ℓ¹ mass dropped.
    pub fn resize(&self, degree: usize) -> (Self, f64) {
        if degree == self.degree {
            return (self.clone(), 0.0);
        }
        let mut out = Self::zeros(self.n, degree);
        out.real = self.real;
        let mut dropped = 0.0;
        let mut k = vec![0; self.n];
        for (flat, c) in self.coeffs.iter().enumerate() {
            if *c == ZERO {
                continue;
            }
            self.decode_into(flat, &mut k);
            match out.index_of(&k) {
                Some(i) => out.coeffs[i] = *c,
                None => dropped += c.norm(),
            }
        }
        (out, dropped)
    }

    /// Zeroes every coefficient of modulus at most `tol`, returning the
    /// ℓ¹ mass removed.
    pub(crate) fn chop(&mut self, tol: f64) -> f64 {
        let mut removed = 0.0;
        for c in &mut self.coeffs {
            if c.norm() <= tol {
                removed += c.norm();
                *c = ZERO;
            }
        }
        removed
    }

    /// Copy at the smallest degree whose discarded coefficients have total
    /// modulus at most `tol`, with that discarded mass.
    pub fn trimmed(&self, tol: f64) -> (Self, f64) {
        let mut shell = vec![0.0; self.degree + 1];
        let mut k = vec![0; self.n];
        for (flat, c) in self.coeffs.iter().enumerate() {
            if *c != ZERO {
                self.decode_into(flat, &mut k);
                let top = k.iter().map(|x| x.unsigned_abs() as usize).max().unwrap_or(0);
                shell[top] += c.norm();
            }
        }
        let mut tail = 0.0;
        let mut degree = self.degree;
        while degree > 0 && tail + shell[degree] <= tol {
            tail += shell[degree];
            degree -= 1;
        }
        self.resize(degree)
    }

    /// Resized copy; panics if that would drop nonzero terms.
    pub fn widened(&self, degree: usize) -> Self {
        let (s, dropped) = self.resize(degree.max(self.degree));
        debug_assert_eq!(dropped, 0.0);
        s
    }

    pub fn scale(&self, a: Complex64) -> Self {
        let mut s = self.clone();
        for c in &mut s.coeffs {
            *c *= a;
        }
        s.real = self.real && a.im == 0.0;
        s
    }

    pub fn scale_real(&self, a: f64) -> Self {
        self.scale(Complex64::new(a, 0.0))
    }

    /// `Σ |c_k| e^{r Σ_j |k_j|}`. Valid for any `r ≥ 0`.
    pub fn coeff_norm(&self, r: f64) -> f64 {
        let w = self.width();
        let d = self.degree as i64;
        // per-axis weights e^{r|k|}
        let axis_w: Vec<f64> = (0..w).map(|i| (r * ((i as i64 - d).abs() as f64)).exp()).collect();
        let mut total = 0.0;
        let mut digits = vec![0usize; self.n];
        for c in &self.coeffs {
            if *c != ZERO {
                let mut wt = 1.0;
                for &dj in &digits {
                    wt *= axis_w[dj];
                }
                total += c.norm() * wt;
            }
            // odometer increment
            for j in (0..self.n).rev() {
                digits[j] += 1;
                if digits[j] < w {
                    break;
                }
                digits[j] = 0;
            }
        }
        total
    }

    /// Both sup-norm estimates on `S_r`.
    pub fn strip_norm(&self, r: f64) -> Result<NormEstimate> {
        check_strip(r)?;
        let coeff_bound = self.coeff_norm(r);
        let grid = Grid::new(self.n, (4 * self.degree + 4).max(16));
        let mut sampled_sup: f64 = 0.0;
        for signs in 0..(1usize << self.n) {
            let y: Vec<f64> = (0..self.n)
                .map(|j| if signs >> j & 1 == 1 { r } else { -r })
                .collect();
            for v in grid.sample_shifted(self, Some(&y)) {
                sampled_sup = sampled_sup.max(v.norm());
            }
        }
        // the sample is a lower estimate of a quantity the coefficient sum
        // majorizes; clamp rounding in the last bit
        Ok(NormEstimate {
            coeff_bound,
            sampled_sup: sampled_sup.min(coeff_bound),
        })
    }

    /// Max of `|h|` over the real grid with `m` points per axis.
    pub fn real_sup(&self, m: usize) -> f64 {
        Grid::new(self.n, m)
            .sample(self)
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    /// `Σ_k c_k e^{i⟨k,θ⟩}` at a complex point.
    pub fn eval(&self, theta: &[Complex64]) -> Result<Complex64> {
        check_dim(self.n, theta.len())?;
        let mut ev = PointEvaluator::new(self.n, self.degree);
        ev.set_point(theta);
        Ok(ev.eval(self))
    }

    /// Evaluation at a real point.
    pub fn eval_real_point(&self, theta: &[f64]) -> Result<Complex64> {
        let z: Vec<Complex64> = theta.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.eval(&z)
    }

    /// The constant term `[h]`.
    pub fn mean(&self) -> Complex64 {
        self.coeff(&vec![0; self.n])
    }

    /// Averages over the listed axes (0-based): keeps only coefficients whose
    /// index vanishes on every listed axis.
    pub fn average(&self, axes: &[usize]) -> Result<Self> {
        for &a in axes {
            if a >= self.n {
                return Err(Error::InvalidInput(format!(
                    "axis {a} out of range for n = {}",
                    self.n
                )));
            }
        }
        Ok(self.filter(|k| axes.iter().all(|&a| k[a] == 0)))
    }

    pub(crate) fn filter(&self, keep: impl Fn(&[i32]) -> bool) -> Self {
        let mut s = self.clone();
        let mut k = vec![0; self.n];
        for (flat, c) in s.coeffs.iter_mut().enumerate() {
            self.decode_into(flat, &mut k);
            if !keep(&k) {
                *c = ZERO;
            }
        }
        s
    }

    /// `[L₀h, L₁h, …, L_nh]`: `L₀h = [h]`, and for `j ≥ 1` `L_jh` collects the
    /// terms with `k_j ≠ 0` and `k_l = 0` for `l > j`. So `L_jh` depends on
    /// `θ₁…θ_j` only and has zero `θ_j`-average.
    pub fn l_decompose(&self) -> Vec<Self> {
        let n = self.n;
        (0..=n)
            .map(|j| {
                self.filter(|k| {
                    if j == 0 {
                        k.iter().all(|&x| x == 0)
                    } else {
                        k[j - 1] != 0 && k[j..].iter().all(|&x| x == 0)
                    }
                })
            })
            .collect()
    }

    /// `L₀h + … + L_jh`, the part depending on `θ₁…θ_j` only.
    pub fn l_partial_sum(&self, j: usize) -> Self {
        self.filter(|k| k[j..].iter().all(|&x| x == 0))
    }

    /// `∂/∂θ_j` (0-based axis).
    pub fn derivative(&self, j: usize) -> Self {
        assert!(j < self.n, "axis out of range");
        let mut s = self.clone();
        let mut k = vec![0; self.n];
        for (flat, c) in s.coeffs.iter_mut().enumerate() {
            self.decode_into(flat, &mut k);
            *c *= I * k[j] as f64;
        }
        s
    }

    /// The antiderivative in `θ_j` with zero `θ_j`-average. Requires
    /// `[h]_j = 0` within [`COEFF_TOL`].
    pub fn antiderivative(&self, j: usize) -> Result<Self> {
        assert!(j < self.n, "axis out of range");
        let mut s = self.clone();
        let mut k = vec![0; self.n];
        let mut defect: f64 = 0.0;
        for (flat, c) in s.coeffs.iter_mut().enumerate() {
            self.decode_into(flat, &mut k);
            if k[j] == 0 {
                defect = defect.max(c.norm());
                *c = ZERO;
            } else {
                *c /= I * k[j] as f64;
            }
        }
        if defect > COEFF_TOL {
            return Err(Error::hypothesis(
                Bound::I2,
                format!("θ_{} average has coefficient of size {defect:.3e}", j + 1),
            ));
        }
        Ok(s)
    }

    /// Index remap for a linear torus map: `h(Aθ)` has coefficients at `Aᵀk`.
    /// Exact; terms landing outside `degree` are dropped and their mass
    /// returned.
    pub fn compose_linear(&self, a: &[Vec<i64>], degree: usize) -> (Self, f64) {
        let n = self.n;
        let mut out = Self::zeros(n, degree);
        out.real = self.real;
        let mut dropped = 0.0;
        let mut k = vec![0; n];
        let mut kk = vec![0i32; n];
        for (flat, c) in self.coeffs.iter().enumerate() {
            if *c == ZERO {
                continue;
            }
            self.decode_into(flat, &mut k);
            for (col, slot) in kk.iter_mut().enumerate() {
                let v: i64 = (0..n).map(|row| a[row][col] * k[row] as i64).sum();
                *slot = v as i32;
            }
            match out.index_of(&kk) {
                Some(i) => out.coeffs[i] += c,
                None => dropped += c.norm(),
            }
        }
        (out, dropped)
    }

    /// `h(θ + s)` for a constant real shift `s`.
    pub fn translate(&self, shift: &[f64]) -> Self {
        let mut s = self.clone();
        let mut k = vec![0; self.n];
        for (flat, c) in s.coeffs.iter_mut().enumerate() {
            self.decode_into(flat, &mut k);
            let phase: f64 = k.iter().zip(shift).map(|(&kj, &sj)| kj as f64 * sj).sum();
            *c *= Complex64::from_polar(1.0, phase);
        }
        s
    }

    /// Pullback `h ∘ φ̃` as a series of degree `degree`.
    ///
    /// Linear maps are remapped exactly; otherwise `h` is evaluated at
    /// `φ̃(θ)` on a uniform grid oversampled by [`COMPOSE_OVERSAMPLE`] and
    /// re-expanded. `dropped` reports the aliasing/truncation mass.
    pub fn compose(&self, phi: &TorusMapLift, degree: usize) -> Result<Composition> {
        check_dim(self.n, phi.dim())?;
        if degree < self.degree {
            return Err(Error::hypothesis(
                Bound::GridDegree,
                format!("output degree {degree} below input degree {}", self.degree),
            ));
        }
        if phi.parts().iter().all(|p| p.is_zero()) {
            let (series, dropped) = self.compose_linear(phi.matrix(), degree);
            return Ok(Composition { series, dropped });
        }
        let grid = Grid::for_degree(self.n, degree, COMPOSE_OVERSAMPLE);
        let values = pullback_values(self, phi, &grid);
        let e = grid.expand(&values, degree, self.real && phi.is_real());
        Ok(Composition {
            series: e.series,
            dropped: e.dropped,
        })
    }

    /// Pointwise product truncated to `degree`, with the dropped mass.
    pub fn mul_truncated(&self, other: &Self, degree: usize) -> Result<(Self, f64)> {
        check_dim(self.n, other.n)?;
        // 2(2N+1) points resolve the full product of two degree-N series
        let top = self.degree.max(other.degree).max(degree);
        let grid = Grid::for_degree(self.n, top, 2);
        let a = grid.sample(self);
        let b = grid.sample(other);
        let prod: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let e = grid.expand(&prod, degree, self.real && other.real);
        Ok((e.series, e.dropped))
    }

    /// Applies `f` pointwise to the values of `inputs` on an oversampled grid
    /// and re-expands to `degree`. Used for quotients, logarithms and the like.
    pub fn map_pointwise<F>(inputs: &[&Self], degree: usize, real: bool, f: F) -> Result<(Self, f64)>
    where
        F: Fn(&[Complex64]) -> Complex64 + Sync + Send,
    {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidInput("no inputs".into()))?;
        let n = first.n;
        let mut top = degree;
        for s in inputs {
            check_dim(n, s.n)?;
            top = top.max(s.degree);
        }
        let grid = Grid::for_degree(n, top, POINTWISE_OVERSAMPLE);
        let sampled: Vec<Vec<Complex64>> = inputs.iter().map(|s| grid.sample(s)).collect();
        let values = exec::map_range_with(
            grid.len(),
            || vec![ZERO; inputs.len()],
            |args, idx| {
                for (a, col) in args.iter_mut().zip(&sampled) {
                    *a = col[idx];
                }
                f(args)
            },
        );
        let e = grid.expand(&values, degree, real);
        Ok((e.series, e.dropped))
    }

    /// [`map_pointwise`](Self::map_pointwise) at the smallest degree in the
    /// sequence `start, 2·start, …` whose result matches `f` to `tol`
    /// (relative to `max(1, |f|)`) at off-grid probe points, trimmed of shells
    /// carrying less than `tol` mass.
    pub fn map_pointwise_adaptive<F>(inputs: &[&Self], start: usize, real: bool, tol: f64, f: F) -> Result<Self>
    where
        F: Fn(&[Complex64]) -> Complex64 + Sync + Send,
    {
        let n = inputs
            .first()
            .ok_or_else(|| Error::InvalidInput("no inputs".into()))?
            .n;
        let top = inputs.iter().map(|s| s.degree).max().unwrap_or(0);
        let mut ev = PointEvaluator::new(n, top);
        let probes = crate::flows::probe_points(n, 24);
        let exact: Vec<Complex64> = probes
            .iter()
            .map(|p| {
                let z: Vec<Complex64> = p.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                ev.set_point(&z);
                let args: Vec<Complex64> = inputs.iter().map(|s| ev.eval(s)).collect();
                f(&args)
            })
            .collect();
        let mut degree = start.max(1);
        loop {
            let (out, _) = Self::map_pointwise(inputs, degree, real, &f)?;
            let mut pe = PointEvaluator::new(n, out.degree);
            let err = probes
                .iter()
                .zip(&exact)
                .map(|(p, v)| {
                    let z: Vec<Complex64> = p.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                    pe.set_point(&z);
                    (pe.eval(&out) - v).norm() / v.norm().max(1.0)
                })
                .fold(0.0, f64::max);
            if err <= tol {
                return Ok(out.trimmed(tol).0);
            }
            degree *= 2;
            if ((2 * degree + 1) as f64).powi(n as i32) > MAX_ADAPTIVE_POINTS {
                return Err(Error::numerical(
                    "map_pointwise",
                    format!("no resolving degree within the grid budget (error {err:.3e})"),
                ));
            }
        }
    }

    /// `num / den` via grid evaluation and re-expansion.
    pub fn quotient(num: &Self, den: &Self, degree: usize) -> Result<(Self, f64)> {
        let min_den = Grid::for_degree(den.n, degree.max(den.degree).max(num.degree), POINTWISE_OVERSAMPLE)
            .sample(den)
            .iter()
            .map(|v| v.norm())
            .fold(f64::INFINITY, f64::min);
        if !(min_den > 1e-8) {
            return Err(Error::numerical(
                "quotient",
                format!("denominator nearly vanishes on the grid (min |den| = {min_den:.3e})"),
            ));
        }
        Self::map_pointwise(&[num, den], degree, num.real && den.real, |v| v[0] / v[1])
    }
}

/// Output of [`PeriodicSeries::compose`].
#[derive(Clone, Debug)]
pub struct Composition {
    pub series: PeriodicSeries,
    pub dropped: f64,
}

/// Values of `h(φ̃(θ))` on `grid`.
pub(crate) fn pullback_values(h: &PeriodicSeries, phi: &TorusMapLift, grid: &Grid) -> Vec<Complex64> {
    let disp: Vec<Vec<Complex64>> = phi.parts().iter().map(|p| grid.sample(p)).collect();
    jet::pullback_on_grid(&[h], phi.matrix(), &disp, grid).swap_remove(0)
}

/// Reusable evaluator of several series at one complex point.
///
/// Power tables `e^{ikθ_j}` are built once per point and shared; the sum is
/// contracted one axis at a time, `O((2N+1)ⁿ)` multiply-adds per series.
#[derive(Clone, Debug)]
pub struct PointEvaluator {
    n: usize,
    degree: usize,
    powers: Vec<Vec<Complex64>>,
    scratch: Vec<Complex64>,
}

impl PointEvaluator {
    pub fn new(n: usize, degree: usize) -> Self {
        PointEvaluator {
            n,
            degree,
            powers: vec![vec![ZERO; 2 * degree + 1]; n],
            scratch: Vec::new(),
        }
    }

    pub fn set_point(&mut self, theta: &[Complex64]) {
        let d = self.degree;
        for (table, t) in self.powers.iter_mut().zip(theta) {
            // e^{iθ} = e^{-Im θ}(cos Re θ + i sin Re θ)
            let w = Complex64::from_polar((-t.im).exp(), t.re);
            let winv = Complex64::from_polar(t.im.exp(), -t.re);
            table[d] = Complex64::new(1.0, 0.0);
            for k in 1..=d {
                table[d + k] = table[d + k - 1] * w;
                table[d - k] = table[d - k + 1] * winv;
            }
        }
    }

    pub fn eval(&mut self, h: &PeriodicSeries) -> Complex64 {
        debug_assert_eq!(h.dim(), self.n);
        assert!(h.degree() <= self.degree, "evaluator degree too small");
        let w = h.width();
        let off = self.degree - h.degree();
        let n = self.n;
        let c = h.coeffs();
        let last = &self.powers[n - 1][off..off + w];
        if n == 1 {
            return c.iter().zip(last).map(|(a, b)| a * b).sum();
        }
        let outer = c.len() / w;
        self.scratch.clear();
        self.scratch.extend(
            c.chunks_exact(w)
                .map(|row| row.iter().zip(last).map(|(a, b)| a * b).sum::<Complex64>()),
        );
        debug_assert_eq!(self.scratch.len(), outer);
        let mut len = outer;
        for axis in (0..n - 1).rev() {
            let tab = &self.powers[axis][off..off + w];
            len /= w;
            for p in 0..len {
                let mut s = ZERO;
                for (k, t) in tab.iter().enumerate() {
                    s += self.scratch[p * w + k] * t;
                }
                self.scratch[p] = s;
            }
        }
        self.scratch[0]
    }
}

fn binary_same_shape(a: &PeriodicSeries, b: &PeriodicSeries) -> (PeriodicSeries, PeriodicSeries) {
    assert_eq!(a.n, b.n, "series dimensions differ");
    let d = a.degree.max(b.degree);
    (a.widened(d), b.widened(d))
}

impl Add for &PeriodicSeries {
    type Output = PeriodicSeries;
    fn add(self, rhs: &PeriodicSeries) -> PeriodicSeries {
        let (mut x, y) = binary_same_shape(self, rhs);
        for (a, b) in x.coeffs.iter_mut().zip(&y.coeffs) {
            *a += b;
        }
        x.real = self.real && rhs.real;
        x
    }
}

impl Sub for &PeriodicSeries {
    type Output = PeriodicSeries;
    fn sub(self, rhs: &PeriodicSeries) -> PeriodicSeries {
        let (mut x, y) = binary_same_shape(self, rhs);
        for (a, b) in x.coeffs.iter_mut().zip(&y.coeffs) {
            *a -= b;
        }
        x.real = self.real && rhs.real;
        x
    }
}

impl Neg for &PeriodicSeries {
    type Output = PeriodicSeries;
    fn neg(self) -> PeriodicSeries {
        self.scale_real(-1.0)
    }
}

impl Mul<f64> for &PeriodicSeries {
    type Output = PeriodicSeries;
    fn mul(self, rhs: f64) -> PeriodicSeries {
        self.scale_real(rhs)
    }
}

// ---------------------------------------------------------------------------
// JSON

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TermJson {
    pub k: Vec<i32>,
    pub re: f64,
    pub im: f64,
}

/// Wire format `{"n", "N", "real", "coeffs": [{"k", "re", "im"}]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesJson {
    pub n: usize,
    #[serde(rename = "N")]
    pub degree: usize,
    pub real: bool,
    pub coeffs: Vec<TermJson>,
}

impl From<&PeriodicSeries> for SeriesJson {
    fn from(s: &PeriodicSeries) -> Self {
        SeriesJson {
            n: s.n,
            degree: s.degree,
            real: s.real,
            coeffs: s
                .terms()
                .map(|(k, c)| TermJson {
                    k: k.0,
                    re: c.re,
                    im: c.im,
                })
                .collect(),
        }
    }
}

impl TryFrom<SeriesJson> for PeriodicSeries {
    type Error = Error;

    fn try_from(j: SeriesJson) -> Result<Self> {
        if j.n == 0 {
            return Err(Error::InvalidInput("n must be at least 1".into()));
        }
        let terms: Vec<(Vec<i32>, Complex64)> = j
            .coeffs
            .into_iter()
            .map(|t| (t.k, Complex64::new(t.re, t.im)))
            .collect();
        let s = PeriodicSeries::from_terms(j.n, j.degree, &terms)?;
        if j.real {
            s.into_real()
        } else {
            Ok(s.into_complex())
        }
    }
}

impl Serialize for PeriodicSeries {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        SeriesJson::from(self).serialize(ser)
    }
}

impl<'de> Deserialize<'de> for PeriodicSeries {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let j = SeriesJson::deserialize(de)?;
        PeriodicSeries::try_from(j).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn r(x: f64) -> Complex64 {
        c(x, 0.0)
    }

    #[test]
    fn eval_examples() {
        let one = PeriodicSeries::constant(2, 3, r(1.0));
        assert_eq!(one.eval(&[c(0.3, 0.2), c(-1.0, 0.5)]).unwrap(), r(1.0));

        let e1 = PeriodicSeries::monomial(2, 2, &[1, 0], r(1.0)).unwrap();
        assert_abs_diff_eq!(e1.eval(&[r(0.0), r(0.0)]).unwrap().re, 1.0, epsilon = 1e-15);

        let cos1 = PeriodicSeries::cosine(1, 2, &[1], 1.0).unwrap();
        let v = cos1.eval(&[c(0.0, 0.4)]).unwrap();
        assert_abs_diff_eq!(v.re, 0.4f64.cosh(), epsilon = 1e-14);
        assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-14);

        assert!(matches!(
            one.eval(&[r(0.0)]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn average_examples() {
        let e1 = PeriodicSeries::monomial(1, 2, &[1], r(1.0)).unwrap();
        assert!(e1.average(&[0]).unwrap().is_zero());
        let k = PeriodicSeries::constant(2, 2, r(3.5));
        assert_eq!(k.average(&[1]).unwrap(), k);
        let cs = PeriodicSeries::cosine(2, 2, &[1, 0], 1.0)
            .unwrap()
            .mul_truncated(&PeriodicSeries::sine(2, 2, &[0, 1], 1.0).unwrap(), 2)
            .unwrap()
            .0;
        assert!(cs.average(&[1]).unwrap().coeff_norm(0.0) < 1e-16);
        assert!(k.average(&[2]).is_err());
    }

    #[test]
    fn l_decompose_disjoint_support() {
        let sin1 = PeriodicSeries::sine(2, 2, &[1, 0], 1.0).unwrap();
        let cos1sin2 = PeriodicSeries::cosine(2, 2, &[1, 0], 1.0)
            .unwrap()
            .mul_truncated(&PeriodicSeries::sine(2, 2, &[0, 1], 1.0).unwrap(), 2)
            .unwrap()
            .0;
        let three = PeriodicSeries::constant(2, 2, r(3.0));
        let h = &(&three + &sin1) + &cos1sin2;
        let l = h.l_decompose();
        assert!((&l[0] - &three).coeff_norm(0.0) < 1e-15);
        assert!((&l[1] - &sin1).coeff_norm(0.0) < 1e-15);
        assert!((&l[2] - &cos1sin2).coeff_norm(0.0) < 1e-15);

        let sin2 = PeriodicSeries::sine(2, 2, &[0, 1], 1.0).unwrap();
        let l = sin2.l_decompose();
        assert!(l[0].is_zero() && l[1].is_zero());
        assert_eq!(l[2], sin2);
    }

    #[test]
    fn derivative_examples() {
        let sin1 = PeriodicSeries::sine(2, 3, &[1, 0], 1.0).unwrap();
        let cos1 = PeriodicSeries::cosine(2, 3, &[1, 0], 1.0).unwrap();
        assert!((&sin1.derivative(0) - &cos1).coeff_norm(0.0) < 1e-15);
        assert!(sin1.derivative(1).is_zero());
        let e3 = PeriodicSeries::monomial(1, 3, &[3], r(1.0)).unwrap();
        assert_eq!(e3.derivative(0).coeff(&[3]), c(0.0, 3.0));
    }

    #[test]
    fn antiderivative_examples() {
        let sin1 = PeriodicSeries::sine(1, 3, &[1], 1.0).unwrap();
        let cos1 = PeriodicSeries::cosine(1, 3, &[1], 1.0).unwrap();
        assert!((&cos1.antiderivative(0).unwrap() - &sin1).coeff_norm(0.0) < 1e-15);
        let e1 = PeriodicSeries::monomial(1, 3, &[1], r(1.0)).unwrap();
        assert_eq!(e1.antiderivative(0).unwrap().coeff(&[1]), c(0.0, -1.0));
        let one = PeriodicSeries::constant(1, 3, r(1.0));
        let err = one.antiderivative(0).unwrap_err();
        assert_eq!(err.bound(), Some(Bound::I2));
    }

    #[test]
    fn strip_norm_examples() {
        let rr = 0.37;
        let e1 = PeriodicSeries::monomial(1, 4, &[1], r(1.0)).unwrap();
        let ne = e1.strip_norm(rr).unwrap();
        assert_abs_diff_eq!(ne.coeff_bound, rr.exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(ne.sampled_sup, rr.exp(), epsilon = 1e-13);

        let k = PeriodicSeries::constant(2, 2, c(-0.6, 0.8));
        let ne = k.strip_norm(0.5).unwrap();
        assert_abs_diff_eq!(ne.coeff_bound, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ne.sampled_sup, 1.0, epsilon = 1e-15);

        let cos1 = PeriodicSeries::cosine(1, 3, &[1], 1.0).unwrap();
        let ne = cos1.strip_norm(rr).unwrap();
        assert_abs_diff_eq!(ne.sampled_sup, rr.cosh(), epsilon = 1e-13);
        assert!(ne.sampled_sup <= ne.coeff_bound);

        assert_eq!(cos1.strip_norm(1.0).unwrap_err().bound(), Some(Bound::StripWidth));
        assert_eq!(cos1.strip_norm(0.0).unwrap_err().bound(), Some(Bound::StripWidth));
    }

    #[test]
    fn compose_examples() {
        let h = PeriodicSeries::from_terms(
            2,
            3,
            &[(vec![1, -2], c(0.3, -0.1)), (vec![0, 3], c(0.0, 0.7))],
        )
        .unwrap();
        let id = TorusMapLift::identity(2, 3);
        let out = h.compose(&id, 3).unwrap();
        assert_eq!(out.series, h);
        assert_eq!(out.dropped, 0.0);

        let shift = 0.7;
        let mut parts = vec![PeriodicSeries::zeros(1, 1)];
        parts[0] = PeriodicSeries::constant(1, 1, r(shift));
        let tr = TorusMapLift::new(vec![vec![1]], parts).unwrap();
        let e1 = PeriodicSeries::monomial(1, 2, &[1], r(1.0)).unwrap();
        let out = e1.compose(&tr, 2).unwrap();
        let expect = Complex64::from_polar(1.0, shift);
        assert!((out.series.coeff(&[1]) - expect).norm() < 1e-14);

        assert_eq!(h.compose(&id, 2).unwrap_err().bound(), Some(Bound::GridDegree));
    }

    #[test]
    fn json_round_trip_and_duplicates() {
        let h = PeriodicSeries::sine(2, 3, &[1, -1], 0.25).unwrap();
        let s = serde_json::to_string(&h).unwrap();
        let back: PeriodicSeries = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
        assert!(back.is_real());

        let dup = r#"{"n":1,"N":2,"real":false,"coeffs":[{"k":[1],"re":1,"im":0},{"k":[1],"re":2,"im":0}]}"#;
        let err = serde_json::from_str::<PeriodicSeries>(dup).unwrap_err();
        assert!(err.to_string().contains("duplicate"));

        let unreal = r#"{"n":1,"N":2,"real":true,"coeffs":[{"k":[1],"re":1,"im":0}]}"#;
        assert!(serde_json::from_str::<PeriodicSeries>(unreal).is_err());
    }

    #[test]
    fn linear_composition_remaps_indices() {
        // h(θ₁ − θ₂, θ₂) for h = e^{i(θ₁ + θ₂)} is e^{iθ₁}
        let h = PeriodicSeries::monomial(2, 2, &[1, 1], r(1.0)).unwrap();
        let a = vec![vec![1, -1], vec![0, 1]];
        let (out, dropped) = h.compose_linear(&a, 2);
        assert_eq!(dropped, 0.0);
        assert_eq!(out.coeff(&[1, 0]), r(1.0));
    }
}
