use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ovit_bench::{random_matrix, score_sets, toy_images, toy_model};
use ovit_core::eval::roc_auc;
use ovit_core::margin::{cosface_loss, init_prototypes, ClassSubset, MarginSpec};
use ovit_core::patch::extract_patches;
use ovit_core::vit::{embed_images, forward_embeddings, stack_patches, ModelVars};
use ovit_core::{PatchGridSpec, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    // Token projections and attention products of the toy encoder.
    for (m, k, n) in [(1600, 64, 192), (64, 1600, 256), (50, 16, 50)] {
        let a = random_matrix(m, k, 1);
        let b = random_matrix(k, n, 2);
        group.bench_function(
            BenchmarkId::from_parameter(format!("{m}x{k}x{n}")),
            |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()),
        );
    }
    group.finish();
}

fn patches(c: &mut Criterion) {
    let mut group = c.benchmark_group("extract_patches");
    let image = Tensor::from_fn(&[1, 112, 112], |i| (i % 251) as f64 / 251.0);
    for (p, s) in [(28, 28), (28, 14), (16, 8)] {
        let grid = PatchGridSpec::new(112, p, s).unwrap();
        group.bench_function(BenchmarkId::from_parameter(grid.label()), |bench| {
            bench.iter(|| extract_patches(black_box(&image), &grid).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("embed_images");
    group.sample_size(10);
    let images = toy_images(32);
    for stride in [4, 8] {
        let (cfg, params) = toy_model(stride);
        group.bench_function(BenchmarkId::from_parameter(cfg.grid.label()), |bench| {
            bench.iter(|| embed_images(&cfg, &params, black_box(&images)).unwrap())
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    let images = toy_images(32);
    let labels: Vec<usize> = (0..32).map(|i| i % 8).collect();
    let prototypes = init_prototypes(8, 512, &mut ChaCha8Rng::seed_from_u64(1));
    for stride in [4, 8] {
        let (cfg, params) = toy_model(stride);
        group.bench_function(BenchmarkId::from_parameter(cfg.grid.label()), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let vars = ModelVars::bind(&mut tape, &params, true);
                let protos = tape.param(prototypes.clone());
                let patches = stack_patches(images.iter(), &cfg.grid).unwrap();
                let patches = tape.constant(patches);
                let emb =
                    forward_embeddings(&mut tape, &cfg, &vars, patches, images.len()).unwrap();
                let loss = cosface_loss(
                    &mut tape,
                    emb,
                    &labels,
                    protos,
                    &MarginSpec::default(),
                    &ClassSubset::all(8),
                )
                .unwrap();
                tape.backward(loss).unwrap();
                tape
            })
        });
    }
    group.finish();
}

fn auc(c: &mut Criterion) {
    let mut group = c.benchmark_group("roc_auc");
    for n in [1_000, 100_000] {
        let (g, i) = score_sets(n / 11, n - n / 11);
        group.bench_function(BenchmarkId::from_parameter(n), |bench| {
            bench.iter(|| roc_auc(black_box(&g), black_box(&i)).unwrap().auc)
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, patches, forward, train_step, auc);
criterion_main!(benches);
