use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndc_core::classifiers::Variant;
use ndc_core::exec;
use ndc_core::harness::{run_certification, ExperimentConfig};
use ndc_core::schedule::ScheduleSpec;

fn config(variant: Variant) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.schedule = ScheduleSpec::Geometric { sigma_min: 0.002, sigma_max: 80.0, steps: 200, rho: 7.0 };
    c.classifier.variant = variant;
    c.classifier.t_prime = 16;
    c.data.n_test = 16;
    c.smoothing.n0 = 20;
    c.smoothing.n = 100;
    c
}

fn certification(c: &mut Criterion) {
    let mut group = c.benchmark_group("certify_16_points");
    let threads = exec::current_num_threads();
    for variant in [Variant::Epndc, Variant::Apndc] {
        let cfg = config(variant);
        group.bench_with_input(BenchmarkId::new("sequential", variant), &cfg, |b, cfg| {
            b.iter(|| exec::with_threads(1, || run_certification(cfg).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new(format!("parallel_{threads}"), variant), &cfg, |b, cfg| {
            b.iter(|| run_certification(cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5));
    targets = certification
}
criterion_main!(benches);
