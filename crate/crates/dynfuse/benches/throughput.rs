//! Throughput of independent experiment cells under the sequential and
//! parallel backends, plus raw batch-inference speed. `jobs=1` forces
//! in-place sequential execution; `jobs=0` uses the parallel pool when
//! the `parallel` feature (default) is enabled, and is identical to
//! sequential without it.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dynfuse::data::{generate, Dataset, SyntheticSpec, TaskKind};
use dynfuse::model::{Model, ModelConfig};
use dynfuse::moe::{InferencePolicy, MoeConfig};
use dynfuse::par::map_cells;
use dynfuse::trainer::{evaluate, train, TaskLoss, TrainConfig};

fn bench_spec() -> SyntheticSpec {
    SyntheticSpec {
        dims: vec![6, 6],
        n_train: 96,
        n_test: 48,
        p_hard: 0.25,
        task: TaskKind::BinaryClass,
        signal_scale: 3.0,
        noise_scale: 1.0,
        seed: 0,
    }
}

fn model_config() -> ModelConfig {
    ModelConfig::ModalityMoe(MoeConfig::two_expert(vec![6, 6], 2).unwrap())
}

fn run_cell(seed: u64, data: &(Dataset, Dataset)) -> f64 {
    let mut model = Model::build(&model_config()).unwrap();
    model.init(seed);
    let cfg = TrainConfig {
        stage1_epochs: 1,
        stage2_epochs: 1,
        batch_size: 32,
        learning_rate: 1e-2,
        seed,
        ..TrainConfig::default()
    };
    train(&mut model, &data.0, &cfg).unwrap();
    evaluate(&model, &data.1, InferencePolicy::Hard, TaskLoss::CrossEntropy)
        .unwrap()
        .accuracy
        .unwrap()
}

fn sweep_cells(c: &mut Criterion) {
    let data = generate(&bench_spec()).unwrap();
    let mut group = c.benchmark_group("sweep_cells");
    group.sample_size(10);
    for jobs in [1usize, 0] {
        let label = if jobs == 1 { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::new("backend", label), &jobs, |b, &jobs| {
            b.iter(|| map_cells((0..4u64).collect::<Vec<_>>(), jobs, |s| run_cell(s, &data)))
        });
    }
    group.finish();
}

fn batch_inference(c: &mut Criterion) {
    let spec = SyntheticSpec { n_train: 4, n_test: 512, ..bench_spec() };
    let (_, test) = generate(&spec).unwrap();
    let mut model = Model::build(&model_config()).unwrap();
    model.init(0);
    let idx: Vec<usize> = (0..test.len()).collect();
    let inputs = model.inputs_from(&test, &idx).unwrap();
    c.bench_function("hard_inference_512", |b| {
        b.iter(|| model.forward_inference(&inputs, InferencePolicy::Hard).unwrap().cost)
    });
}

criterion_group!(benches, sweep_cells, batch_inference);
criterion_main!(benches);
