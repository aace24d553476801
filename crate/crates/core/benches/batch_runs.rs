//! Throughput of the batch runner: rayon fan-out vs the sequential path.
//!
//! Each batch entry is a shortened rejection-protocol run with its own
//! seed; runs are independent so the parallel and sequential results are
//! byte-identical and only wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use peso_core::simcore::{run_batch, run_batch_sequential, seed_sweep};
use peso_core::sysmodel::example1_scenario;

fn bench_batches(c: &mut Criterion) {
    let mut base = example1_scenario();
    base.sim.horizon = 1.0;

    let mut group = c.benchmark_group("seed_batch");
    group.sample_size(10);
    for batch in [2usize, 8] {
        let seeds: Vec<u64> = (1..=batch as u64).collect();
        let scenarios = seed_sweep(&base, &seeds);
        group.bench_with_input(
            BenchmarkId::new("parallel", batch),
            &scenarios,
            |b, scenarios| b.iter(|| black_box(run_batch(scenarios))),
        );
        group.bench_with_input(
            BenchmarkId::new("sequential", batch),
            &scenarios,
            |b, scenarios| b.iter(|| black_box(run_batch_sequential(scenarios))),
        );
    }
    group.finish();
}

criterion_group!(benches, bench_batches);
criterion_main!(benches);
