//! Local Taylor jets of series on a grid.
//!
//! Flows, pullbacks and inversions evaluate a fixed set of series at
//! `θ₀ + d` where `θ₀` runs over a grid and `d` is a small (possibly complex)
//! displacement. Evaluating the full sum costs `(2N+1)ⁿ` per point; a jet
//! stores the scaled derivatives `D^α h(θ₀)/α!` for `|α| ≤ K` instead, so each
//! evaluation costs one short dot product. The order `K` is chosen from an a
//! priori remainder bound so that the truncation is below rounding.

use num_complex::Complex64;

use crate::exec;
use crate::grid::Grid;
use crate::series::{PeriodicSeries, PointEvaluator};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Highest Taylor order tried before falling back to direct evaluation.
pub(crate) const MAX_ORDER: usize = 12;

/// Relative remainder target, roughly one unit in the last place.
const REL_TOL: f64 = 1.2e-16;

#[derive(Clone, Debug)]
pub(crate) struct Jet {
    n: usize,
    series: usize,
    /// `(parent, axis)` per multi-index; index 0 is the zero index.
    tree: Vec<(usize, usize)>,
    /// Point-major: `tables[(idx * series + s) * A + a]`.
    tables: Vec<Complex64>,
}

/// Multi-indices with `|α| ≤ order`, ordered by total degree, each stored with
/// a parent `α − e_j` that precedes it.
fn multi_indices(n: usize, order: usize) -> (Vec<Vec<u32>>, Vec<(usize, usize)>) {
    let mut alphas = vec![vec![0u32; n]];
    let mut tree = vec![(0usize, 0usize)];
    let mut level_start = 0;
    for _ in 0..order {
        let level_end = alphas.len();
        for p in level_start..level_end {
            // extend only along axes ≥ the last nonzero axis to avoid repeats
            let last = alphas[p].iter().rposition(|&x| x > 0).unwrap_or(0);
            for j in last..n {
                let mut a = alphas[p].clone();
                a[j] += 1;
                alphas.push(a);
                tree.push((p, j));
            }
        }
        level_start = level_end;
    }
    (alphas, tree)
}

/// Smallest order whose Taylor remainder at displacement radius `radius` is
/// below rounding for every series, or `None` if the radius is too large.
pub(crate) fn choose_order(series: &[&PeriodicSeries], radius: f64) -> Option<usize> {
    if !(radius.is_finite()) {
        return None;
    }
    if radius == 0.0 {
        return Some(0);
    }
    let mut best = 0;
    for h in series {
        let n = h.dim();
        let mut k = vec![0i32; n];
        // (|k|₁ F, |c_k|) pairs
        let mut terms = Vec::new();
        let mut mass = 0.0;
        for (flat, c) in h.coeffs().iter().enumerate() {
            if *c == ZERO {
                continue;
            }
            h.decode_into(flat, &mut k);
            let l1: f64 = k.iter().map(|x| x.unsigned_abs() as f64).sum();
            mass += c.norm();
            if l1 > 0.0 {
                terms.push((l1 * radius, c.norm()));
            }
        }
        if terms.is_empty() {
            continue;
        }
        let target = REL_TOL * mass;
        let mut found = None;
        for order in 0..=MAX_ORDER {
            // |e^z − T_K(z)| ≤ |z|^{K+1}/(K+1)! e^{|z|}
            let mut fact = 1.0;
            for i in 1..=order + 1 {
                fact *= i as f64;
            }
            let bound: f64 = terms
                .iter()
                .map(|&(z, c)| c * z.powi(order as i32 + 1) / fact * z.exp())
                .sum();
            if bound <= target {
                found = Some(order);
                break;
            }
        }
        best = best.max(found?);
    }
    Some(best)
}

impl Jet {
    pub(crate) fn new(grid: &Grid, series: &[&PeriodicSeries], order: usize) -> Self {
        let n = grid.dim();
        let (alphas, tree) = multi_indices(n, order);
        let na = alphas.len();
        let ns = series.len();
        let len = grid.len();
        let mut tables = vec![ZERO; len * ns * na];
        for (s, h) in series.iter().enumerate() {
            assert_eq!(h.dim(), n);
            for (a, alpha) in alphas.iter().enumerate() {
                let mut d = (*h).clone();
                let mut fact = 1.0;
                for (j, &m) in alpha.iter().enumerate() {
                    for i in 1..=m {
                        d = d.derivative(j);
                        fact *= i as f64;
                    }
                }
                let vals = grid.sample(&d.scale_real(1.0 / fact));
                for (idx, v) in vals.into_iter().enumerate() {
                    tables[(idx * ns + s) * na + a] = v;
                }
            }
        }
        Jet {
            n,
            series: ns,
            tree,
            tables,
        }
    }

    /// Fills `mono` with `d^α` for every stored multi-index.
    pub(crate) fn monomials(&self, d: &[Complex64], mono: &mut Vec<Complex64>) {
        debug_assert_eq!(d.len(), self.n);
        mono.clear();
        mono.push(ONE);
        for &(p, j) in &self.tree[1..] {
            let v = mono[p] * d[j];
            mono.push(v);
        }
    }

    /// Values of every series at `θ₀(idx) + d`, given `d^α` in `mono`.
    pub(crate) fn eval_into(&self, idx: usize, mono: &[Complex64], out: &mut [Complex64]) {
        let na = self.tree.len();
        for (s, o) in out.iter_mut().enumerate().take(self.series) {
            let row = &self.tables[(idx * self.series + s) * na..][..na];
            *o = row.iter().zip(mono).map(|(a, b)| a * b).sum();
        }
    }
}

/// Values of every target at `Aθ + d(θ)` for each grid point `θ`, where
/// `disp[j]` holds `d_j` on the grid. Uses a jet when the displacement is
/// small enough, direct evaluation otherwise.
pub(crate) fn pullback_on_grid(
    targets: &[&PeriodicSeries],
    matrix: &[Vec<i64>],
    disp: &[Vec<Complex64>],
    grid: &Grid,
) -> Vec<Vec<Complex64>> {
    let n = grid.dim();
    let m = grid.per_axis() as i64;
    let ns = targets.len();
    let radius = disp
        .iter()
        .flat_map(|col| col.iter().map(|v| v.norm()))
        .fold(0.0, f64::max);
    let rows: Vec<Vec<Complex64>> = match choose_order(targets, radius) {
        Some(order) => {
            let jet = Jet::new(grid, targets, order);
            exec::map_range_with(
                grid.len(),
                || (vec![0usize; n], vec![ZERO; n], Vec::new(), vec![ZERO; ns]),
                |(digits, d, mono, out), idx| {
                    let mut rest = idx;
                    for j in (0..n).rev() {
                        digits[j] = rest % grid.per_axis();
                        rest /= grid.per_axis();
                    }
                    // the image of a grid point under an integer matrix is a grid point
                    let mut base = 0usize;
                    for row in matrix {
                        let s: i64 = row.iter().zip(digits.iter()).map(|(a, &i)| a * i as i64).sum();
                        base = base * grid.per_axis() + s.rem_euclid(m) as usize;
                    }
                    for j in 0..n {
                        d[j] = disp[j][idx];
                    }
                    jet.monomials(d, mono);
                    jet.eval_into(base, mono, out);
                    out.clone()
                },
            )
        }
        None => {
            let degree = targets.iter().map(|t| t.degree()).max().unwrap_or(0);
            exec::map_range_with(
                grid.len(),
                || (PointEvaluator::new(n, degree), vec![0.0; n], vec![ZERO; n]),
                |(ev, pt, z), idx| {
                    grid.point_into(idx, pt);
                    for (k, row) in matrix.iter().enumerate() {
                        let lin: f64 = row.iter().zip(pt.iter()).map(|(a, x)| *a as f64 * x).sum();
                        z[k] = disp[k][idx] + lin;
                    }
                    ev.set_point(z);
                    targets.iter().map(|t| ev.eval(t)).collect()
                },
            )
        }
    };
    // transpose to one column per target
    (0..ns).map(|s| rows.iter().map(|r| r[s]).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_tree_enumerates_each_multi_index_once() {
        let (alphas, tree) = multi_indices(3, 4);
        // C(3 + 4, 3) multi-indices of total degree ≤ 4
        assert_eq!(alphas.len(), 35);
        let mut sorted = alphas.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 35);
        for (a, &(p, j)) in alphas.iter().zip(&tree).skip(1) {
            let mut q = a.clone();
            q[j] -= 1;
            assert_eq!(q, alphas[p]);
        }
    }

    #[test]
    fn jet_matches_direct_evaluation() {
        let h = PeriodicSeries::from_terms(
            2,
            5,
            &[
                (vec![5, -3], Complex64::new(0.2, 0.1)),
                (vec![-1, 2], Complex64::new(-0.7, 0.0)),
                (vec![0, 0], Complex64::new(1.0, 0.0)),
            ],
        )
        .unwrap();
        let radius = 2e-3;
        let order = choose_order(&[&h], radius).unwrap();
        assert!(order >= 2 && order <= MAX_ORDER);
        let grid = Grid::for_degree(2, 5, 1);
        let jet = Jet::new(&grid, &[&h], order);
        let mut ev = PointEvaluator::new(2, 5);
        let mut mono = Vec::new();
        let mut out = [ZERO];
        let d = [Complex64::new(1.5e-3, -1e-3), Complex64::new(-0.8e-3, 0.4e-3)];
        for idx in [0, 17, grid.len() - 1] {
            jet.monomials(&d, &mut mono);
            jet.eval_into(idx, &mono, &mut out);
            let p = grid.point(idx);
            let z: Vec<Complex64> = p.iter().zip(&d).map(|(x, dj)| dj + x).collect();
            ev.set_point(&z);
            assert!((out[0] - ev.eval(&h)).norm() < 1e-14);
        }
    }

    #[test]
    fn large_radius_is_rejected() {
        let h = PeriodicSeries::monomial(1, 8, &[8], Complex64::new(1.0, 0.0)).unwrap();
        assert!(choose_order(&[&h], 1.0).is_none());
        assert_eq!(choose_order(&[&h], 0.0), Some(0));
    }
}
