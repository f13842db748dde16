use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use rama::harness::{bench, check_trace, run_scenario, BenchConfig, ScenarioConfig};

fn scenario(c: &mut Criterion) {
    let mut group = c.benchmark_group("scenario");
    group.sample_size(10).measurement_time(Duration::from_secs(10));

    let cfg = ScenarioConfig::default();
    group.bench_function("fault_free_run", |b| b.iter(|| run_scenario(&cfg).unwrap()));

    let trace = run_scenario(&cfg).unwrap().trace;
    group.bench_function("check_trace", |b| b.iter(|| check_trace(&trace)));

    let bc = BenchConfig { switches: 4, warmup_ms: 10, measure_ms: 50, ..Default::default() };
    group.bench_function("closed_loop_50ms", |b| b.iter(|| bench(&bc).unwrap()));
    group.finish();
}

criterion_group!(benches, scenario);
criterion_main!(benches);
