use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vibekit::gclfa::{
    gclfa_attention_with, gclfa_reference, CoarseSpec, ExecOptions, GridSize, RoPEParams, TokenGrid, WindowSpec,
};
use vibekit::flowmatch::{integrate_batch, OdeMethod};
use vibekit::par::Execution;
use vibekit::toydit::{DitConfig, ToyDiT};
use vibekit::{Rng, Tensor};

fn inputs(g: usize, d: usize) -> (TokenGrid, TokenGrid, TokenGrid) {
    let size = GridSize::new(g, g).unwrap();
    let mut rng = Rng::new(g as u64);
    let mut draw = || TokenGrid::new(size, rng.gaussian([g * g, d], 1.0)).unwrap();
    (draw(), draw(), draw())
}

fn executors(c: &mut Criterion) {
    let mut group = c.benchmark_group("gclfa");
    group.sample_size(10);
    for (g, win, pool) in [(16, 4, 2), (32, 8, 4), (64, 16, 4)] {
        let (q, k, v) = inputs(g, 16);
        let win = WindowSpec::new(win, win).unwrap();
        let coarse = CoarseSpec::new(pool).unwrap();
        let rope = RoPEParams::default();
        let id = format!("{g}x{g}");
        group.bench_with_input(BenchmarkId::new("dense_oracle", &id), &(), |b, _| {
            b.iter(|| gclfa_reference(&q, &k, &v, win, coarse, rope).unwrap())
        });
        for (name, exec) in [("blocked_sequential", Execution::Sequential), ("blocked_parallel", Execution::Parallel)] {
            let opts = ExecOptions { exec, record_weights: false };
            group.bench_with_input(BenchmarkId::new(name, &id), &(), |b, _| {
                b.iter(|| gclfa_attention_with(&q, &k, &v, win, coarse, rope, opts).unwrap())
            });
        }
    }
    group.finish();
}

fn trajectories(c: &mut Criterion) {
    let mut group = c.benchmark_group("toydit_sampling");
    group.sample_size(10);
    let model = ToyDiT::init(DitConfig::default(), &mut Rng::new(0)).unwrap();
    let mut rng = Rng::new(1);
    let starts: Vec<Tensor> = (0..8).map(|_| rng.gaussian([8, 8], 1.0)).collect();
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| integrate_batch(&model, &starts, 1.0, 10, OdeMethod::Euler, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, executors, trajectories);
criterion_main!(benches);
