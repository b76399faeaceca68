//! Sequential against data-parallel execution on the two hot loops: ray
//! tracing a full stage and batched noisy inference.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::Rng;

use optonet::geometry::{compile_mask, StageGeometry};
use optonet::network::{Fidelity, HardwareNetwork, Twin};
use optonet::optics::raytrace::transfer_matrix;
use optonet::optics::RaytraceOptions;
use optonet::{seed, Execution};

const POLICIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn raytrace(c: &mut Criterion) {
    let geom = StageGeometry::paper_input();
    let mut rng = seed::rng(1);
    let w = Array2::from_shape_simple_fn((64, 100), || rng.random::<f64>());
    let mask = compile_mask(&w, &geom).unwrap();
    let mut group = c.benchmark_group("transfer_matrix");
    group.sample_size(10);
    for (name, execution) in POLICIES {
        let opts = RaytraceOptions { execution, ..RaytraceOptions::default() };
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| transfer_matrix(&geom, &mask, 20_000, 3, *opts).unwrap())
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let net = HardwareNetwork::paper(10, 0).unwrap();
    let twin = Twin::default();
    let mut rng = seed::rng(2);
    let x = Array2::from_shape_simple_fn((2048, 64), || rng.random::<f64>());
    let mut group = c.benchmark_group("forward_batch_noisy");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| twin.forward_batch(&net, x.view(), Fidelity::Noisy, 4, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, raytrace, inference);
criterion_main!(benches);
