use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use condseg::exec::Execution;
use condseg::loss::LossConfig;
use condseg::model::{Model, ModelConfig};
use condseg::scene::{AugmentConfig, Dataset, GeneratorConfig};
use condseg::train::{batch_gradients, batch_indices, multi_scale_eval, EvalConfig};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn data(count: usize) -> Dataset {
    Dataset::generate(&GeneratorConfig::default(), 0, count, Execution::Sequential).unwrap()
}

fn batch_step(c: &mut Criterion) {
    let train = data(16);
    let model = Model::<f32>::init(ModelConfig::default(), train.classes, 1).unwrap();
    let loss = LossConfig::default();
    let aug = AugmentConfig::default();
    let idx = batch_indices(1, 0, 8, train.len());
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&model, &train, &idx, &loss, &aug, 1, 0, exec).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let val = data(4);
    let model = Model::<f32>::init(ModelConfig::default(), val.classes, 1).unwrap();
    let cfg = EvalConfig::default();
    let mut group = c.benchmark_group("multi_scale_eval");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| multi_scale_eval(&model, &val, &cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn scene_generation(c: &mut Criterion) {
    let cfg = GeneratorConfig::default();
    let mut group = c.benchmark_group("generate_scenes");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| Dataset::generate(&cfg, 0, 32, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_step, evaluation, scene_generation);
criterion_main!(benches);
