//! Normalizing a volume density on the torus to its mean.
//!
//! Given `ω = (1 + b(θ)) dθ`, the triangular map `θ_j ↦ θ_j + f_j(θ₁,…,θ_j)`
//! with `f_j = D_j⁻¹ L_jb / (1 + L₀b + … + L_{j−1}b)` satisfies
//! `(1 + [b]) Π_j (1 + D_j f_j) = 1 + b`, since the product telescopes.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{check_strip, Bound, Error, Result};
use crate::flows::TorusMapLift;
use crate::grid::Grid;
use crate::series::PeriodicSeries;

/// Default working degree as a multiple of the input degree.
pub const MOSER_DEGREE_FACTOR: usize = 3;

/// `ω = (1 + b) dθ` with `b` real and `1 + b > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeDensity {
    b: PeriodicSeries,
}

impl VolumeDensity {
    pub fn new(b: PeriodicSeries) -> Result<Self> {
        if !b.is_real() {
            return Err(Error::InvalidInput("density perturbation must be real on ℝⁿ".into()));
        }
        let grid = Grid::for_degree(b.dim(), b.degree(), 2);
        let min = grid
            .sample(&b)
            .iter()
            .map(|v| 1.0 + v.re)
            .fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(Error::hypothesis(
                Bound::PositiveDensity,
                format!("min of 1 + b on the grid is {min:.3e}"),
            ));
        }
        Ok(VolumeDensity { b })
    }

    pub fn b(&self) -> &PeriodicSeries {
        &self.b
    }
}

/// Output of [`moser_normalize`].
#[derive(Clone, Debug)]
pub struct MoserResult {
    /// `θ ↦ θ + f(θ)`.
    pub map: TorusMapLift,
    /// `[b]`.
    pub mean: f64,
    /// `max |(1 + [b]) Π(1 + D_j f_j) − (1 + b)|` on a verification grid.
    pub residual: f64,
    /// `max_j ‖f_j‖_r`, to compare with `8π ‖b‖_r`.
    pub f_norm: f64,
    pub b_norm: f64,
    pub dropped: f64,
}

/// [`moser_normalize_with`] at degree `3N`.
pub fn moser_normalize(b: &VolumeDensity, r: f64) -> Result<MoserResult> {
    moser_normalize_with(b, r, MOSER_DEGREE_FACTOR * b.b.degree().max(1))
}

/// Solves `(1 + [b]) φ*dθ = (1 + b) dθ` for a triangular near-identity `φ`,
/// with the quotients truncated to `degree`. Refuses unless
/// `‖b‖_r ≤ r/(32nπ)`.
pub fn moser_normalize_with(density: &VolumeDensity, r: f64, degree: usize) -> Result<MoserResult> {
    check_strip(r)?;
    let b = &density.b;
    let n = b.dim();
    let b_norm = b.coeff_norm(r);
    let bound = r / (32.0 * n as f64 * PI);
    if b_norm > bound {
        return Err(Error::hypothesis(
            Bound::Na,
            format!("‖b‖_r = {b_norm:.6e} > r/(32nπ) = {bound:.6e}"),
        ));
    }
    let degree = degree.max(b.degree());
    let l = b.l_decompose();
    let mean = l[0].mean().re;
    let mut partial = &PeriodicSeries::constant(n, b.degree(), Complex64::new(1.0, 0.0)) + &l[0];
    let mut parts = Vec::with_capacity(n);
    let mut dropped = 0.0;
    for j in 1..=n {
        let num = l[j].antiderivative(j - 1)?;
        let (f, d) = PeriodicSeries::quotient(&num, &partial, degree)?;
        dropped += d;
        // the quotient of real series is real; keep the L_j support exactly
        let f = f.filter(|k| k[j - 1] != 0 && k[j..].iter().all(|&x| x == 0));
        parts.push(f);
        partial = &partial + &l[j];
    }
    let f_norm = parts.iter().map(|f| f.coeff_norm(r)).fold(0.0, f64::max);
    let residual = density_residual(b, mean, &parts);
    Ok(MoserResult {
        map: TorusMapLift::from_parts(parts)?,
        mean,
        residual,
        f_norm,
        b_norm,
        dropped,
    })
}

fn density_residual(b: &PeriodicSeries, mean: f64, parts: &[PeriodicSeries]) -> f64 {
    let n = b.dim();
    let degree = parts.iter().map(|p| p.degree()).max().unwrap_or(0).max(b.degree());
    // an odd size not aligned with the construction grid
    let grid = Grid::new(n, 2 * degree + 3);
    let target = grid.sample(b);
    let factors: Vec<Vec<Complex64>> = parts
        .iter()
        .enumerate()
        .map(|(j, f)| grid.sample(&f.derivative(j)))
        .collect();
    (0..grid.len())
        .map(|i| {
            let prod: Complex64 = factors.iter().map(|col| 1.0 + col[i]).product();
            ((1.0 + mean) * prod - (1.0 + target[i])).norm()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_density_gives_identity() {
        let d = VolumeDensity::new(PeriodicSeries::zeros(2, 3)).unwrap();
        let res = moser_normalize(&d, 0.5).unwrap();
        assert_eq!(res.mean, 0.0);
        assert!(res.map.parts().iter().all(|p| p.is_zero()));
    }

    #[test]
    fn one_dimensional_cosine() {
        let eps = 1e-3;
        let b = PeriodicSeries::cosine(1, 2, &[1], eps).unwrap();
        let res = moser_normalize(&VolumeDensity::new(b).unwrap(), 0.5).unwrap();
        let sin = PeriodicSeries::sine(1, 6, &[1], eps).unwrap();
        assert!((&res.map.parts()[0] - &sin).coeff_norm(0.0) < 1e-15);
        assert_eq!(res.mean, 0.0);
        assert!(res.residual < 1e-15);
    }

    #[test]
    fn refuses_large_density() {
        let b = PeriodicSeries::cosine(2, 2, &[1, 1], 0.1).unwrap();
        let err = moser_normalize(&VolumeDensity::new(b).unwrap(), 0.5).unwrap_err();
        assert_eq!(err.bound(), Some(Bound::Na));
    }

    #[test]
    fn nonpositive_density_is_rejected() {
        let b = PeriodicSeries::constant(1, 1, Complex64::new(-1.5, 0.0));
        assert_eq!(
            VolumeDensity::new(b).unwrap_err().bound(),
            Some(Bound::PositiveDensity)
        );
    }
}
