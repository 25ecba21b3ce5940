mod common;

use proptest::prelude::*;
use tnf_core::fibering::{
    fibering_normalize, fibering_step, k_uniqueness_residual, FiberingPhase, KamConstants, KamSchedule,
};
use tnf_core::flows::{flow, MapEvaluator};
use tnf_core::{Bound, Complex64, PeriodicSeries, PeriodicVectorField};

fn real_point(x: &[f64]) -> Vec<Complex64> {
    x.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

#[test]
fn shear_phase_is_removed_in_one_step() {
    let eps = 1e-3;
    let h = PeriodicSeries::sine(2, 2, &[0, 1], eps).unwrap();
    // ‖h‖ = εe^{r₀} sits above the default ε r₀³ hypothesis
    let mut schedule = KamSchedule::new(0.5);
    schedule.eps = 0.02;
    let res = fibering_normalize(&FiberingPhase::new(h).unwrap(), &schedule).unwrap();
    assert_eq!(res.steps.len(), 1);
    assert!(res.k.coeff_norm(0.5) <= 1e-12);
    // Φ(θ) = (θ₁ − ε sin θ₂, θ₂)
    let mut ev = MapEvaluator::new(&res.normalizer);
    for i in 0..64 {
        let t = [0.37 * i as f64, 1.91 * i as f64 + 0.2];
        let img = ev.value(&real_point(&t));
        assert!((img[0].re - (t[0] - eps * t[1].sin())).abs() <= 1e-10);
        assert!((img[1].re - t[1]).abs() <= 1e-10);
    }
}

#[test]
fn random_phases_contract_quadratically() {
    let mut rng = common::rng(4);
    let r0 = 0.5;
    for i in 0..6 {
        let h = common::random_series(&mut rng, 2, 6, true, 0.3, r0, 1e-3 * r0.powi(3));
        let res = fibering_normalize(&FiberingPhase::new(h).unwrap(), &KamSchedule::new(r0)).unwrap();
        let exp = res.trace.contraction_exponent(1e-14).unwrap();
        assert!(exp >= 1.8, "run {i}: exponent {exp}");
        assert!(res.residual <= 1e-8 && res.det_residual <= 1e-8, "run {i}");
        assert!(res.trace.records.iter().all(|r| r.in_regime));
        assert!(res.k.mean().norm() < 1e-14);
    }
}

#[test]
fn field_bound_stays_below_fitted_constant() {
    // ‖p‖_r ≤ c₂ n b_r/(rδ) on random admissible inputs
    let mut rng = common::rng(7);
    let c2 = KamConstants::FITTED.c2;
    for (n, deg, count) in [(2usize, 6usize, 10), (3, 3, 3)] {
        for _ in 0..count {
            let (r, delta) = (0.5, 1.0 / 16.0);
            let h = common::random_series(&mut rng, n, deg, true, 0.3, r, 1e-3 * r.powi(3));
            let ph = FiberingPhase::new(h.widened(3 * deg)).unwrap();
            let st = fibering_step(&ph, r, delta).unwrap();
            let ratio = st.field.norm(r) * r * delta / (n as f64 * st.b);
            assert!(ratio <= c2, "n = {n}: ratio {ratio:.3e}");
        }
    }
}

/// Time-1 flow of `(∂₂ψ, −∂₁ψ)` for a random real stream function `ψ`.
fn random_volume_preserving(rng: &mut rand_chacha::ChaCha8Rng, size: f64) -> tnf_core::TorusMapLift {
    let psi = common::random_series(rng, 2, 3, true, 0.5, 0.5, size);
    let v = PeriodicVectorField::new(vec![psi.derivative(1), -&psi.derivative(0)]).unwrap();
    assert!(v.divergence().coeff_norm(0.0) < 1e-16);
    flow(&v, 1.0, 0.5, 0.1).unwrap().map
}

#[test]
fn k_is_unique_under_volume_preserving_maps() {
    let mut rng = common::rng(12);
    let r0 = 0.5;
    let h = common::random_series(&mut rng, 2, 4, true, 0.3, r0, 5e-4 * r0.powi(3));
    let base = fibering_normalize(&FiberingPhase::new(h.clone()).unwrap(), &KamSchedule::new(r0)).unwrap();
    for i in 0..4 {
        let v = random_volume_preserving(&mut rng, 1e-5);
        // μ∘V = θ₁ + (V₁ − θ₁) + h∘V
        let hv = h.compose(&v, 2 * v.degree().max(h.degree())).unwrap().series;
        let moved = (&v.parts()[0].widened(hv.degree()) + &hv.widened(v.degree())).real_part();
        let res = fibering_normalize(&FiberingPhase::new(moved).unwrap(), &KamSchedule::new(r0)).unwrap();
        let d = k_uniqueness_residual(&base.k, &res.k, false).unwrap();
        assert!(d <= 1e-6, "map {i}: residual {d:.3e}");
    }
}

#[test]
fn refusals_name_the_bound() {
    let r0 = 0.5;
    let big = PeriodicSeries::sine(2, 2, &[1, 1], 1e-3).unwrap();
    let err = fibering_normalize(&FiberingPhase::new(big).unwrap(), &KamSchedule::new(r0)).unwrap_err();
    assert_eq!(err.bound(), Some(Bound::Smallh));
    let steep = PeriodicSeries::sine(2, 2, &[2, 0], 0.2).unwrap();
    let err = fibering_normalize(&FiberingPhase::new(steep).unwrap(), &KamSchedule::new(r0)).unwrap_err();
    assert_eq!(err.bound(), Some(Bound::P4));
    let complex = PeriodicSeries::monomial(2, 1, &[0, 1], Complex64::new(1e-6, 0.0)).unwrap();
    assert!(FiberingPhase::new(complex).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// A phase that already depends on θ₁ only is returned unchanged, up to
    /// removing its mean by a translation.
    #[test]
    fn normal_phases_are_fixed(a in -1e-2f64..1e-2, b in -1e-2f64..1e-2, c in -1e-2f64..1e-2) {
        let h = &(&PeriodicSeries::sine(2, 2, &[1, 0], a).unwrap()
            + &PeriodicSeries::cosine(2, 2, &[2, 0], b).unwrap())
            + &PeriodicSeries::constant(2, 2, Complex64::new(c, 0.0));
        let res = fibering_normalize(&FiberingPhase::new(h.into_real().unwrap()).unwrap(), &KamSchedule::new(0.5)).unwrap();
        prop_assert!(res.steps.is_empty());
        prop_assert!((res.shift - c).abs() < 1e-15);
        // k(θ) = κ(θ − c) where κ is the nonconstant part
        for i in 0..16 {
            let t = 0.4 * i as f64;
            let s = t - c;
            let want = a * s.sin() + b * (2.0 * s).cos();
            let got = res.k.eval_real_point(&[t]).unwrap().re;
            prop_assert!((got - want).abs() < 1e-14);
        }
    }
}
