//! Uniform grids on the real torus and the FFT bridge between point values
//! and coefficients.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::exec;
use crate::series::PeriodicSeries;

/// `m` equispaced points per axis on `[0, 2π)ⁿ`, row-major with axis 0 slowest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    n: usize,
    m: usize,
}

/// Result of expanding grid values back into a truncated series.
#[derive(Clone, Debug)]
pub struct Expansion {
    pub series: PeriodicSeries,
    /// ℓ¹ mass of the resolved grid modes that fall outside the degree bound.
    pub dropped: f64,
}

impl Grid {
    pub fn new(n: usize, m: usize) -> Self {
        assert!(n >= 1 && m >= 1, "grid needs n ≥ 1 and m ≥ 1");
        Grid { n, m }
    }

    /// Grid with `oversample · (2N + 1)` points per axis.
    pub fn for_degree(n: usize, degree: usize, oversample: usize) -> Self {
        Grid::new(n, oversample.max(1) * (2 * degree + 1))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn per_axis(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.m.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.m as f64
    }

    /// Real coordinates of point `idx`.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.point_into(idx, &mut out);
        out
    }

    pub fn point_into(&self, mut idx: usize, out: &mut [f64]) {
        let h = self.spacing();
        for j in (0..self.n).rev() {
            out[j] = (idx % self.m) as f64 * h;
            idx /= self.m;
        }
    }

    /// Values of `h` at every grid point (zero-padded inverse FFT).
    ///
    /// Exact up to rounding when `m ≥ 2N + 1`; coarser grids alias.
    pub fn sample(&self, h: &PeriodicSeries) -> Vec<Complex64> {
        self.sample_shifted(h, None)
    }

    /// Values of `h(θ + i·y)` at every grid point `θ`, for a fixed imaginary
    /// offset `y` (one entry per axis).
    pub fn sample_shifted(&self, h: &PeriodicSeries, imag: Option<&[f64]>) -> Vec<Complex64> {
        assert_eq!(h.dim(), self.n, "series and grid dimensions differ");
        let mut buf = vec![Complex64::new(0.0, 0.0); self.len()];
        let n = self.n;
        let m = self.m as i64;
        let mut k = vec![0i32; n];
        for (flat, c) in h.coeffs().iter().enumerate() {
            if *c == Complex64::new(0.0, 0.0) {
                continue;
            }
            h.decode_into(flat, &mut k);
            let mut pos = 0usize;
            let mut weight = 1.0;
            for j in 0..n {
                let kj = k[j] as i64;
                pos = pos * self.m + kj.rem_euclid(m) as usize;
                if let Some(y) = imag {
                    // e^{ik(x+iy)} = e^{-ky} e^{ikx}
                    weight *= (-(kj as f64) * y[j]).exp();
                }
            }
            buf[pos] += c * weight;
        }
        fft_nd(&mut buf, n, self.m, FftDirection::Inverse);
        buf
    }

    /// Coefficients `|k_j| ≤ degree` of the trigonometric interpolant of
    /// `values`. When `real` is set the result is projected onto real-valued
    /// series (`c_{−k} = conj c_k`).
    pub fn expand(&self, values: &[Complex64], degree: usize, real: bool) -> Expansion {
        assert_eq!(values.len(), self.len());
        assert!(
            self.m > 2 * degree,
            "grid of {} points per axis cannot resolve degree {}",
            self.m,
            degree
        );
        let mut buf = values.to_vec();
        fft_nd(&mut buf, self.n, self.m, FftDirection::Forward);
        let scale = 1.0 / self.len() as f64;
        let mut out = PeriodicSeries::zeros(self.n, degree);
        let mut dropped = 0.0;
        let mut k = vec![0i32; self.n];
        let half = self.m / 2;
        for (pos, v) in buf.iter().enumerate() {
            let mut rest = pos;
            let mut inside = true;
            for j in (0..self.n).rev() {
                let i = rest % self.m;
                rest /= self.m;
                // Nyquist bin for even m is split evenly; treat it as dropped.
                let kj = if i <= half { i as i64 } else { i as i64 - self.m as i64 };
                if kj.unsigned_abs() as usize > degree || (self.m % 2 == 0 && i == half) {
                    inside = false;
                }
                k[j] = kj as i32;
            }
            let c = v * scale;
            if inside {
                out.set_coeff(&k, c);
            } else {
                dropped += c.norm();
            }
        }
        if real {
            out.project_real();
        }
        Expansion {
            series: out,
            dropped,
        }
    }

    /// Evaluates `f` at every grid point (in parallel when enabled).
    pub fn map_points<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &[f64]) -> T + Sync + Send,
    {
        let n = self.n;
        exec::map_range_with(
            self.len(),
            || vec![0.0; n],
            |pt, idx| {
                self.point_into(idx, pt);
                f(idx, pt)
            },
        )
    }
}

/// In-place multidimensional FFT over a row-major `mⁿ` array (unnormalized).
pub(crate) fn fft_nd(data: &mut [Complex64], n: usize, m: usize, dir: FftDirection) {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft(m, dir);
    let total = data.len();
    debug_assert_eq!(total, m.pow(n as u32));
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut lines = vec![Complex64::new(0.0, 0.0); total];
    for axis in 0..n {
        let stride = m.pow((n - 1 - axis) as u32);
        if stride == 1 {
            fft.process_with_scratch(data, &mut scratch);
            continue;
        }
        let outer = total / (m * stride);
        // gather every line along `axis` into contiguous storage
        let mut l = 0;
        for o in 0..outer {
            let base = o * m * stride;
            for inner in 0..stride {
                for i in 0..m {
                    lines[l * m + i] = data[base + i * stride + inner];
                }
                l += 1;
            }
        }
        fft.process_with_scratch(&mut lines, &mut scratch);
        let mut l = 0;
        for o in 0..outer {
            let base = o * m * stride;
            for inner in 0..stride {
                for i in 0..m {
                    data[base + i * stride + inner] = lines[l * m + i];
                }
                l += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn sample_matches_direct_evaluation() {
        let h = PeriodicSeries::from_terms(
            2,
            3,
            &[
                (vec![1, -2], c(0.3, -0.1)),
                (vec![-3, 0], c(0.0, 0.7)),
                (vec![0, 0], c(1.0, 0.0)),
            ],
        )
        .unwrap();
        let g = Grid::for_degree(2, 3, 2);
        let vals = g.sample(&h);
        for idx in [0, 5, 77, g.len() - 1] {
            let p: Vec<Complex64> = g.point(idx).into_iter().map(|x| c(x, 0.0)).collect();
            let direct = h.eval(&p).unwrap();
            assert!((vals[idx] - direct).norm() < 1e-13);
        }
    }

    #[test]
    fn expand_inverts_sample() {
        let h = PeriodicSeries::from_terms(
            3,
            2,
            &[(vec![1, -2, 1], c(0.3, -0.1)), (vec![0, 0, -2], c(-0.5, 0.2))],
        )
        .unwrap();
        let g = Grid::for_degree(3, 2, 1);
        let e = g.expand(&g.sample(&h), 2, false);
        assert!(e.dropped < 1e-15);
        assert!((&e.series - &h).coeff_norm(0.0) < 1e-14);
    }

    #[test]
    fn shifted_sample_is_analytic_continuation() {
        let h = PeriodicSeries::from_terms(1, 1, &[(vec![1], c(1.0, 0.0))]).unwrap();
        let g = Grid::new(1, 8);
        let v = g.sample_shifted(&h, Some(&[-0.3]));
        // |e^{iθ}| = e^{-Im θ}
        for z in v {
            assert!((z.norm() - 0.3f64.exp()).abs() < 1e-14);
        }
    }
}
