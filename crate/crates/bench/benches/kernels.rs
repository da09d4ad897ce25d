use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tcp_bench::{experiment, random_matrix};
use tcp_core::autodiff::Graph;
use tcp_core::prompt::classifier_value;
use tcp_core::train::{train_run, Mode, TrainOptions};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (random_matrix(n, n, 1), random_matrix(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
                let out = g.matmul(va, vb).unwrap();
                black_box(g.value(out).len())
            })
        });
    }
    group.finish();
}

fn encoder_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("classifier_forward");
    for mode in [Mode::Coop, Mode::Tcp] {
        let exp = experiment(mode);
        let prompt = exp.initial_prompt().unwrap();
        group.bench_function(mode.name(), |bench| {
            bench.iter(|| {
                classifier_value(&prompt, &exp.config.injection, &exp.w_clip, &exp.encoder, &exp.vocab).unwrap()
            })
        });
    }
    group.finish();
}

fn train_steps(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_10_steps");
    group.sample_size(10);
    for mode in [Mode::Coop, Mode::Tcp] {
        let mut exp = experiment(mode);
        exp.config.train.max_steps = Some(10);
        group.bench_function(mode.name(), |bench| {
            bench.iter(|| train_run(&exp, exp.initial_checkpoint().unwrap(), &TrainOptions::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, encoder_forward, train_steps);
criterion_main!(benches);
