use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use defectscan_bench::{photos, random_tensor, scores_and_labels};
use defectscan_core::augment::{self, AugmentConfig};
use defectscan_core::metrics;
use defectscan_core::tensor::{Padding, Tape};
use defectscan_core::trainer::{ArchConfig, Model, Pass};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        group.throughput(Throughput::Elements((2 * n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::<f32>::new();
                let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                black_box(tape.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let x = random_tensor(&[8, 56, 56, 16], 3);
    let k = random_tensor(&[3, 3, 16, 24], 4);
    group.bench_function("forward 8x56x56x16 -> 24", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::new();
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
            black_box(tape.conv2d(xv, kv, None, 1, Padding::Same).unwrap());
        })
    });
    group.bench_function("forward+backward 8x56x56x16 -> 24", |bench| {
        bench.iter(|| {
            let mut tape = Tape::<f32>::new();
            let (xv, kv) = (tape.leaf(x.clone(), true), tape.leaf(k.clone(), true));
            let y = tape.conv2d(xv, kv, None, 1, Padding::Same).unwrap();
            let loss = tape.sum_all(y).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
    group.finish();
}

fn model_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    let mut model = Model::build(ArchConfig::default(), 0).unwrap();
    for batch in [1usize, 8] {
        let images = photos(batch, 224);
        let x = model.preprocess(&images).unwrap();
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_with_input(BenchmarkId::new("eval forward", batch), &batch, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                black_box(model.forward(&mut tape, x.clone(), Pass::Eval).unwrap().prob);
            })
        });
    }
    group.finish();
}

fn augmentation(c: &mut Criterion) {
    let img = photos(1, 224).remove(0);
    let cfg = AugmentConfig::default();
    let mut epoch = 0u64;
    c.bench_function("augment 224x224", |bench| {
        bench.iter(|| {
            epoch += 1;
            black_box(augment::augment(&img, &cfg, 0, "bench", epoch).unwrap());
        })
    });
}

fn auc(c: &mut Criterion) {
    let mut group = c.benchmark_group("auc_roc");
    for n in [1_000usize, 100_000] {
        let (scores, labels) = scores_and_labels(n, 5);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(metrics::auc_roc(&scores, &labels).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, conv, model_forward, augmentation, auc);
criterion_main!(benches);
