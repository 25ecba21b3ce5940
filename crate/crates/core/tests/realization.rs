mod common;

use proptest::prelude::*;
use tnf_core::flows::finite_difference_det;
use tnf_core::realization::{
    build_divergence_vector_field, c8, realization_step, realize_form, RealizationSchedule, C7,
};
use tnf_core::{Bound, Complex64, PeriodicSeries};

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Taylor coefficients of `(1 + 3x/2)/(1 + x/2)³ − 1` in `x`.
fn riccati_a_hat(order: usize) -> Vec<f64> {
    // (1 + x/2)^{−3} = Σ (−1)^k (k+1)(k+2)/2 (x/2)^k
    let t: Vec<f64> = (0..=order)
        .map(|k| (-1f64).powi(k as i32) * ((k + 1) * (k + 2)) as f64 / 2.0 * 0.5f64.powi(k as i32))
        .collect();
    let mut out: Vec<f64> = (0..=order).map(|k| t[k] + if k > 0 { 1.5 * t[k - 1] } else { 0.0 }).collect();
    out[0] -= 1.0;
    out
}

/// Taylor coefficients of `log(1 + x/2)`.
fn log_one_plus_half(order: usize) -> Vec<f64> {
    (0..=order)
        .map(|k| if k == 0 { 0.0 } else { -(-0.5f64).powi(k as i32) / k as f64 })
        .collect()
}

#[test]
fn riccati_step_matches_closed_form() {
    let eps = 1e-3;
    let a = PeriodicSeries::monomial(1, 1, &[1], c(eps, 0.0)).unwrap();
    let st = realization_step(&a, 0.5, 0.1).unwrap();
    let ah = riccati_a_hat(8);
    assert!(ah[1].abs() < 1e-15);
    assert!((ah[2] + 0.75).abs() < 1e-15);
    for k in 0..=8 {
        let want = ah[k] * eps.powi(k as i32);
        assert!((st.a_hat.coeff(&[k as i32]) - want).norm() < 1e-10 * eps.powi(2), "k = {k}");
    }
    // ψ(z) = z/(1 + εz/2), so log g = −log(1 + εz/2)
    let lg = log_one_plus_half(8);
    for k in 0..=8 {
        let want = -lg[k] * eps.powi(k as i32);
        assert!((st.map.log_g[0].coeff(&[k as i32]) - want).norm() < 1e-16, "k = {k}");
    }
    for &x in &[0.0, 1.3, -2.2, 3.0] {
        let theta = c(x, 0.1);
        let z = (c(0.0, 1.0) * theta).exp();
        let w = st.map.eval_theta(&[theta])[0];
        assert!((w - z / (1.0 + eps * z / 2.0)).norm() < 1e-15);
    }
    assert!(st.residual < 1e-12);
}

#[test]
fn log_det_matches_finite_differences() {
    let eps = 1e-2;
    let a = &PeriodicSeries::monomial(2, 2, &[1, 0], c(eps, 0.0)).unwrap()
        + &PeriodicSeries::monomial(2, 2, &[-1, 2], c(0.0, 0.5 * eps)).unwrap();
    let st = realization_step(&a, 0.5, 0.2).unwrap();
    let phi = st.map.to_torus_map().unwrap();
    for p in [[0.3, 1.1], [2.0, -0.7], [-1.4, 2.9]] {
        let th = [c(p[0], 0.0), c(p[1], 0.0)];
        let f = phi.eval(&th).unwrap();
        let shift: Complex64 = f.iter().zip(&th).map(|(x, y)| x - y).sum();
        let det = (c(0.0, 1.0) * shift).exp() * finite_difference_det(&phi, &p, 1e-4);
        let from_flow = st.log_det.eval(&th).unwrap().exp();
        assert!((det - from_flow).norm() < 1e-8);
    }
    assert!(st.residual < 1e-9);
}

#[test]
fn riccati_full_realization() {
    let eps = 1e-3;
    let a = PeriodicSeries::monomial(1, 1, &[1], c(eps, 0.0)).unwrap();
    let mut s = RealizationSchedule::new(0.5);
    // ‖εz‖_{0.5} = εe^{0.5} exceeds the default εr₀ bound
    s.eps = 1e-2;
    let res = realize_form(&a, &s).unwrap();
    assert!(res.det_residual <= 1e-8);
    // φ(z) = z + εz²/2 solves φ′ = 1 + εz
    let lg = log_one_plus_half(8);
    for k in 0..=8 {
        let want = lg[k] * eps.powi(k as i32);
        assert!((res.map.log_g[0].coeff(&[k as i32]) - want).norm() < 1e-14, "k = {k}");
    }
    assert!(res.inverse_residual <= 1e-9);
    assert!(res.det_min > 0.99 && res.phase_gradient_min > 0.99);
}

#[test]
fn random_two_dimensional_forms() {
    let mut rng = common::rng(31);
    let r0 = 0.5;
    for _ in 0..3 {
        let mut a = common::random_series(&mut rng, 2, 4, false, 0.3, r0, 1e-4);
        a.set_coeff(&[-1, -1], c(0.0, 0.0));
        let res = realize_form(&a, &RealizationSchedule::new(r0)).unwrap();
        assert!(res.det_residual <= 1e-7, "{}", res.det_residual);
        assert!(res.inverse_residual <= 1e-9);
        assert!(res.det_min > 0.5);
        assert!(res.phase_gradient_min > 0.5);
        assert!(res.injectivity_ratio > 0.5);
        for w in res.trace.records.windows(2) {
            if w[1].size > 0.0 {
                let bound = C7 * w[0].size.powi(2) / (w[0].r_m * w[0].delta_m);
                assert!(w[1].size <= bound, "a_m+1 = {:.3e} > {bound:.3e}", w[1].size);
            }
        }
        assert!(res.trace.records.last().unwrap().size <= 1e-13);
    }
}

#[test]
fn regime_constant_is_at_least_the_field_constant() {
    assert!(c8(2) >= C7);
    assert!((c8(1) - 4.0 * std::f64::consts::E.powi(3) * std::f64::consts::PI).abs() < 1e-9);
}

#[test]
fn refusals() {
    let r0 = 0.5;
    let ob = &PeriodicSeries::monomial(2, 1, &[-1, -1], c(1e-5, 0.0)).unwrap()
        + &PeriodicSeries::monomial(2, 1, &[1, 0], c(1e-5, 0.0)).unwrap();
    let err = realize_form(&ob, &RealizationSchedule::new(r0)).unwrap_err();
    assert_eq!(err.bound(), Some(Bound::Kn));

    let big = PeriodicSeries::monomial(2, 1, &[1, 0], c(0.1, 0.0)).unwrap();
    let err = realize_form(&big, &RealizationSchedule::new(r0)).unwrap_err();
    assert_eq!(err.bound(), Some(Bound::FormSmall));
    let err = realization_step(&big, r0, 0.01).unwrap_err();
    assert_eq!(err.bound(), Some(Bound::F4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn divergence_field_reconstructs_and_is_gauged(seed in 0u64..1_000_000, n in 1usize..4, degree in 1usize..4) {
        let mut rng = common::rng(seed);
        let mut a = common::random_series(&mut rng, n, degree, false, 0.3, 0.5, 1e-3);
        a.set_coeff(&vec![-1; n], c(0.0, 0.0));
        let v = build_divergence_vector_field(&a).unwrap();
        let diff = &v.divergence() - &a.widened(degree + 1);
        prop_assert!(diff.coeff_norm(0.0) <= 1e-12);
        for (j, q) in v.components().iter().enumerate() {
            prop_assert!(q.terms().all(|(k, _)| k.0[j] != 0));
        }
    }
}
