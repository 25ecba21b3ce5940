use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tnf_core::exec;
use tnf_core::flows::{flow, invert_map};
use tnf_core::{Complex64, PeriodicSeries, PeriodicVectorField, TorusMapLift};

/// Deterministic real series with geometric decay and coefficient norm
/// `size` at `r = 0.5`.
fn series(n: usize, degree: usize, seed: u32, size: f64) -> PeriodicSeries {
    let d = degree as i32;
    let side = 2 * degree + 1;
    let mut state = seed.wrapping_mul(2_654_435_761).max(1);
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        state as f64 / u32::MAX as f64 - 0.5
    };
    let terms: Vec<(Vec<i32>, Complex64)> = (0..side.pow(n as u32))
        .map(|mut flat| {
            let mut k = vec![0; n];
            for j in (0..n).rev() {
                k[j] = (flat % side) as i32 - d;
                flat /= side;
            }
            let amp = (-0.4 * k.iter().map(|x| x.abs()).sum::<i32>() as f64).exp();
            (k, Complex64::new(next(), next()) * amp)
        })
        .collect();
    let s = PeriodicSeries::from_terms(n, degree, &terms).unwrap().real_part();
    let scale = size / s.coeff_norm(0.5);
    s.scale_real(scale)
}

fn near_identity(n: usize, degree: usize, size: f64) -> TorusMapLift {
    TorusMapLift::from_parts((0..n).map(|j| series(n, degree, 7 + j as u32, size)).collect()).unwrap()
}

fn bench_flow(c: &mut Criterion) {
    let mut group = c.benchmark_group("flow");
    for &(n, degree) in &[(2usize, 6usize), (2, 10), (3, 4)] {
        let v = PeriodicVectorField::new((0..n).map(|j| series(n, degree, 11 + j as u32, 1e-3)).collect()).unwrap();
        let id = format!("n{n}_N{degree}");
        group.bench_with_input(BenchmarkId::new("parallel", &id), &v, |b, v| {
            b.iter(|| flow(v, 1.0, 0.5, 0.1).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", &id), &v, |b, v| {
            b.iter(|| exec::sequential(|| flow(v, 1.0, 0.5, 0.1).unwrap()))
        });
    }
    group.finish();
}

fn bench_inversion(c: &mut Criterion) {
    let mut group = c.benchmark_group("inversion");
    for &(n, degree) in &[(2usize, 6usize), (2, 10), (3, 4)] {
        let phi = near_identity(n, degree, 1e-3);
        let id = format!("n{n}_N{degree}");
        group.bench_with_input(BenchmarkId::new("parallel", &id), &phi, |b, phi| {
            b.iter(|| invert_map(phi, 0.5).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", &id), &phi, |b, phi| {
            b.iter(|| exec::sequential(|| invert_map(phi, 0.5).unwrap()))
        });
    }
    group.finish();
}

fn bench_evaluation(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluation");
    for &(n, degree) in &[(2usize, 6usize), (2, 10), (3, 4)] {
        let h = series(n, degree, 3, 1e-2);
        let phi = near_identity(n, degree, 1e-3);
        let id = format!("n{n}_N{degree}");
        group.bench_with_input(BenchmarkId::new("parallel", &id), &(&h, &phi), |b, (h, phi)| {
            b.iter(|| h.compose(phi, 2 * degree).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", &id), &(&h, &phi), |b, (h, phi)| {
            b.iter(|| exec::sequential(|| h.compose(phi, 2 * degree).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_flow, bench_inversion, bench_evaluation);
criterion_main!(benches);
