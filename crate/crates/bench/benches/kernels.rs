use std::hint::black_box;

use collapse_bench::fixture;
use collapse_core::diosi::{diosi_trajectory, DiosiParams};
use collapse_core::grid::{collapse_flow, CollapseSpec, Grid, HamiltonianSpec};
use collapse_core::master::{evolve_diosi_master, DensityMatrix};
use collapse_core::stats::ks_two_sample;
use collapse_core::{grw_trajectory, make_gaussian_packet, GrwParams, StreamKey};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn split_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("split_step");
    for n in [128usize, 512, 2048] {
        let (phi0, prop) = fixture(n, 0.01).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| prop.step(black_box(&phi0), 0.01).unwrap())
        });
    }
    g.finish();
}

fn collapse(c: &mut Criterion) {
    let (phi0, _) = fixture(512, 0.01).unwrap();
    let spec = CollapseSpec::new(1.0).unwrap();
    c.bench_function("collapse_flow/512", |b| {
        b.iter(|| collapse_flow(black_box(&phi0), spec, 0.03, 1e-3).unwrap())
    });
}

fn trajectories(c: &mut Criterion) {
    let (phi0, prop) = fixture(256, 0.01).unwrap();
    let grw = GrwParams {
        mu: 16.0,
        alpha: 0.125,
        t_max: 1.0,
        sample_times: vec![0.5, 1.0],
        deterministic_times: false,
    };
    let diosi = DiosiParams {
        lambda: 1.0,
        n_substeps_per_unit_time: 100,
        t_max: 1.0,
        sample_times: vec![0.5, 1.0],
    };
    let mut i = 0u64;
    c.bench_function("grw_trajectory/256pts_mu16", |b| {
        b.iter(|| {
            i += 1;
            grw_trajectory(&phi0, &prop, &grw, StreamKey::new(1, i)).unwrap()
        })
    });
    c.bench_function("diosi_trajectory/256pts_100steps", |b| {
        b.iter(|| {
            i += 1;
            diosi_trajectory(&phi0, &prop, &diosi, StreamKey::new(1, i)).unwrap()
        })
    });
}

fn master(c: &mut Criterion) {
    let grid = Grid::new(32, -5.0, 5.0).unwrap();
    let rho0 = DensityMatrix::from_pure(&make_gaussian_packet(grid, 0.0, 0.5, 0.0).unwrap()).unwrap();
    let h = HamiltonianSpec::free(&grid);
    c.bench_function("diosi_master/32pts_t0.1", |b| {
        b.iter(|| evolve_diosi_master(&rho0, &h, 1.0, 0.1, 1e-3).unwrap())
    });
}

fn ks(c: &mut Criterion) {
    let a: Vec<f64> = (0..10_000).map(|k| ((k as f64) * 0.618_033_988_7).fract()).collect();
    let b2: Vec<f64> = (0..10_000).map(|k| ((k as f64) * 0.414_213_562_3).fract()).collect();
    c.bench_function("ks_two_sample/1e4", |b| b.iter(|| ks_two_sample(&a, None, &b2, None).unwrap()));
}

criterion_group!(benches, split_step, collapse, trajectories, master, ks);
criterion_main!(benches);
