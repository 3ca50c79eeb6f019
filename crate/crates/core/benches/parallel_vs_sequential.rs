use std::hint::black_box;

use cib_core::data::{gen_confounded, ConfoundedSpec};
use cib_core::exec::{map_indexed, ExecPolicy};
use cib_core::gradsuite::cib_loss_check;
use cib_core::model::{ExperimentConfig, ModelKind};
use cib_core::trainer::sweep;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const POLICIES: [(&str, ExecPolicy); 2] = [("sequential", ExecPolicy::Sequential), ("parallel", ExecPolicy::Parallel)];

fn bench_sweep(c: &mut Criterion) {
    let spec = ConfoundedSpec { train_size: 256, val_size: 64, test_size: 64, ..Default::default() };
    let bundle = gen_confounded(&spec, 0).unwrap();
    let cfg = ExperimentConfig { model: ModelKind::Cib, epochs: 1, batch_size: 32, ..Default::default() };
    let mut group = c.benchmark_group("sweep_2x2x2");
    group.sample_size(10);
    for (name, policy) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(sweep(&cfg, &bundle, &[1, 4], &[1, 4], &[0, 1], policy).unwrap()))
        });
    }
    group.finish();
}

fn bench_gradient_checks(c: &mut Criterion) {
    let mut group = c.benchmark_group("cib_gradient_checks_x8");
    group.sample_size(10);
    for (name, policy) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(map_indexed(policy, 8, |i| cib_loss_check(i as u64).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweep, bench_gradient_checks);
criterion_main!(benches);
