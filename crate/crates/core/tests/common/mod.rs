#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tnf_core::{Complex64, PeriodicSeries};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random series with coefficients decaying like `e^{−decay·|k|₁}`, rescaled
/// so that its coefficient norm at `r` equals `norm`.
pub fn random_series(
    rng: &mut ChaCha8Rng,
    n: usize,
    degree: usize,
    real: bool,
    decay: f64,
    r: f64,
    norm: f64,
) -> PeriodicSeries {
    let d = degree as i32;
    let mut terms = Vec::new();
    let mut k = vec![-d; n];
    loop {
        let l1: i32 = k.iter().map(|x| x.abs()).sum();
        let amp = (-decay * l1 as f64).exp();
        let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * amp;
        terms.push((k.clone(), c));
        let mut j = n;
        loop {
            if j == 0 {
                break;
            }
            j -= 1;
            k[j] += 1;
            if k[j] <= d {
                break;
            }
            k[j] = -d;
            if j == 0 {
                j = usize::MAX;
                break;
            }
        }
        if j == usize::MAX {
            break;
        }
    }
    let mut s = PeriodicSeries::from_terms(n, degree, &terms).unwrap();
    if real {
        s = s.real_part();
    }
    let scale = norm / s.coeff_norm(r);
    s.scale_real(scale)
}

/// Same as [`random_series`] with the `k = 0` coefficient removed along `axis`.
pub fn random_zero_mean(
    rng: &mut ChaCha8Rng,
    n: usize,
    degree: usize,
    axis: usize,
    r: f64,
    norm: f64,
) -> PeriodicSeries {
    let real = rng.gen_bool(0.5);
    let s = random_series(rng, n, degree, real, 0.3, r, norm);
    let avg = s.average(&[axis]).unwrap();
    &s - &avg
}
