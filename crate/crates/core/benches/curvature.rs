//! Sequential vs rayon execution for the row-parallel hot paths.
//!
//! Build with `--no-default-features` to time the fallback path on both arms.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lanam::data_io::{standardize, synth_toy};
use lanam::laplace::{dense_curvature, fit_posterior, CurvatureConfig};
use lanam::model::AdditiveModel;
use lanam::{Dataset, Execution, Subnetwork};
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup(n: usize) -> (AdditiveModel, Dataset) {
    let s = synth_toy(n, 0, 1.0).unwrap();
    let (data, _) = standardize(&s.data).unwrap();
    (AdditiveModel::for_data(&data, 64, 0).unwrap(), data)
}

fn curvature(c: &mut Criterion) {
    let mut group = c.benchmark_group("dense_curvature");
    for n in [1_000, 8_000] {
        let (m, data) = setup(n);
        let net = &m.feature_nets()[0];
        let w = vec![1.0; n];
        group.throughput(Throughput::Elements(n as u64));
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &exec, |b, &exec| {
                b.iter(|| dense_curvature(net as &dyn Subnetwork, black_box(&data.x), &w, exec))
            });
        }
    }
    group.finish();
}

fn posterior(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_posterior");
    group.sample_size(20);
    let (m, data) = setup(2_000);
    for (label, cfg) in [("dense", CurvatureConfig::default()), ("kfac", CurvatureConfig::kfac())] {
        for (name, exec) in MODES {
            group.bench_function(BenchmarkId::new(name, label), |b| {
                b.iter(|| fit_posterior(&m, black_box(&data.x), &cfg, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn predict(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict_latent");
    let (m, data) = setup(20_000);
    group.throughput(Throughput::Elements(data.len() as u64));
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| m.predict_latent_with(black_box(&data.x), exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, curvature, posterior, predict);
criterion_main!(benches);
