use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qtrans_core::andersen::{run_trajectory, trajectory_rng, ReferenceSystem, ThermostatConfig};
use qtrans_core::oscillator::{harmonic_hamiltonian, position_operator};
use qtrans_core::{build_g0, energy_weight, step_gn, DensityMatrix, NoiseModel, SuperOperator};

fn model(n: usize) -> NoiseModel {
    NoiseModel::from_diffusion(
        harmonic_hamiltonian(n, 1.0),
        position_operator(n, 1.0, 1.0, 1.0),
        1e-3,
        1.0,
    )
    .unwrap()
}

fn g0(n: usize) -> SuperOperator {
    build_g0(&model(n)).unwrap()
}

fn superoperator(c: &mut Criterion) {
    let mut group = c.benchmark_group("superop");
    for n in [4, 10, 16] {
        let g = g0(n);
        let h = harmonic_hamiltonian(n, 1.0);
        let rho = DensityMatrix::thermal(&h, 0.5).unwrap();
        let p = rho.matrix().clone();
        group.bench_with_input(BenchmarkId::new("apply", n), &n, |b, _| {
            b.iter(|| g.apply(black_box(rho.matrix())).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sandwich", n), &n, |b, _| {
            b.iter(|| g.sandwich(black_box(&p), &p, &p, &p).unwrap())
        });
    }
    group.finish();
}

fn propagator(c: &mut Criterion) {
    let mut group = c.benchmark_group("propagator");
    group.sample_size(20);
    for n in [4, 10] {
        let m = model(n);
        group.bench_with_input(BenchmarkId::new("build_g0", n), &n, |b, _| {
            b.iter(|| build_g0(black_box(&m)).unwrap())
        });
        let wp = energy_weight(&build_g0(&m).unwrap(), &m.hamiltonian, 0.5).unwrap();
        let rho = DensityMatrix::thermal(&m.hamiltonian, 0.3).unwrap();
        group.bench_with_input(BenchmarkId::new("step_gn", n), &n, |b, _| {
            b.iter(|| step_gn(&wp, black_box(&rho)).unwrap())
        });
    }
    group.finish();
}

fn reference_bath(c: &mut Criterion) {
    let config = ThermostatConfig {
        n_traj: 1,
        run_length: 10,
        ..ThermostatConfig::default()
    };
    let system = ReferenceSystem::new(config).unwrap();
    c.bench_function("andersen/ten_cycles", |b| {
        let mut k = 0;
        b.iter(|| {
            k += 1;
            run_trajectory(&system, &mut trajectory_rng(1, k)).unwrap()
        })
    });
}

criterion_group!(benches, superoperator, propagator, reference_bath);
criterion_main!(benches);
