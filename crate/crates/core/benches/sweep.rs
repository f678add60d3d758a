use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use collectium::aggregation::FusionConfig;
use collectium::simcost::{builtin_model, sweep, sweep_sequential, CostModel, ModelSpec, Strategy, BUILTIN_MODELS};

fn sweep_grid(c: &mut Criterion) {
    let models: Vec<ModelSpec> = BUILTIN_MODELS.iter().map(|n| builtin_model(n).unwrap()).collect();
    let costs = CostModel::default();
    let fusion = FusionConfig::default();
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for max_p in [16usize, 128] {
        let p_list: Vec<usize> = (1..=max_p).filter(|p| p.is_power_of_two() || p % 3 == 0).collect();
        group.bench_with_input(BenchmarkId::new("sequential", max_p), &p_list, |b, ps| {
            b.iter(|| sweep_sequential(&models, &Strategy::ALL, ps, &costs, &fusion).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("rayon", max_p), &p_list, |b, ps| {
            b.iter(|| sweep(&models, &Strategy::ALL, ps, &costs, &fusion).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sweep_grid);
criterion_main!(benches);
