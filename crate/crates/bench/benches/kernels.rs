use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use step_core::dialogue::SynthConfig;
use step_core::pipeline::{Dataset, Heads, Model, PreparedSample, TrainConfig};
use step_core::rng::{derive_rng, normal_vec};
use step_core::{Tape, Tensor};

fn rand_tensor(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = derive_rng(seed, "bench");
    Tensor::new(vec![rows, cols], normal_vec(&mut rng, rows * cols, 1.0)).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let (a, b) = (rand_tensor(1, n, n), rand_tensor(2, n, n));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                black_box(tape.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

struct Fixture {
    model: Model,
    samples: Vec<PreparedSample>,
}

fn fixture() -> Fixture {
    let data = Dataset::synthetic(&SynthConfig::default()).unwrap();
    let model = Model::new(TrainConfig::default(), data.graph.clone(), data.vocab.clone()).unwrap();
    let samples = model.prepare_all(&data.corpus.train[..54]).unwrap();
    Fixture { model, samples }
}

fn model_paths(c: &mut Criterion) {
    let fx = fixture();
    let m = &fx.model;

    c.bench_function("rgcn_forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = m.bind_frozen(&mut tape);
            black_box(m.graph_embeddings(&mut tape, &bound).unwrap());
        })
    });

    let mut tape = Tape::new();
    let bound = m.bind_frozen(&mut tape);
    let h = m.graph_embeddings(&mut tape, &bound).unwrap();
    let h = tape.value(h).clone();
    c.bench_function("fformer_fuse_sample", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = m.bind_frozen(&mut tape);
            let ff = m.fformer(&bound);
            let h = tape.constant(h.clone());
            black_box(m.fuse_sample(&mut tape, &bound, &ff, h, &fx.samples[0]).unwrap());
        })
    });

    let batch: Vec<&PreparedSample> = fx.samples.iter().collect();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("rec_batch_54", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = m.params.bind(&mut tape, &[]);
            let out = m.forward_batch(&mut tape, &bound, &batch, 4, Heads::Rec).unwrap();
            tape.backward(out.total).unwrap();
            black_box(out.values.total);
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, model_paths);
criterion_main!(benches);
