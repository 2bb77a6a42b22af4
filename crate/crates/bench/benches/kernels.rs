use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use fuselab_core::data::synth::{generate, GenConfig};
use fuselab_core::evaluation::roc_auc;
use fuselab_core::losses::LmclParams;
use fuselab_core::models::{Architecture, CnnArch, CnnParams, FusionParams, HeadKind, Patch};
use fuselab_core::Graph;

fn patch(size: usize) -> Patch {
    Patch::new(size, (0..size * size).map(|i| (i % 29) as f64 / 28.0).collect()).unwrap()
}

fn cnn_step(c: &mut Criterion) {
    let arch = CnnArch::new(Architecture::Basic, 64);
    let params = CnnParams::init(&arch, HeadKind::Linear, 1).unwrap();
    let batch: Vec<Patch> = (0..16).map(|_| patch(64)).collect();
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
    c.bench_function("cnn forward+backward, batch 16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true).unwrap();
            let xs: Vec<_> = batch.iter().map(|p| g.constant(p.input_tensor()).unwrap()).collect();
            let out = bound.forward(&mut g, &xs).unwrap();
            let loss = bound
                .head
                .loss(&mut g, out.descriptors, out.probs, &labels, &LmclParams::default())
                .unwrap();
            g.backward(loss).unwrap();
            black_box(g.len())
        })
    });
}

fn fusion_step(c: &mut Criterion) {
    let params = FusionParams::init(HeadKind::Linear, false, 1);
    let rows = fuselab_core::Tensor::filled(&[16, 512], 0.1);
    let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
    c.bench_function("fusion forward+backward, batch 16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true).unwrap();
            let a = g.constant(rows.clone()).unwrap();
            let u = g.constant(rows.clone()).unwrap();
            let out = bound.forward(&mut g, a, u).unwrap();
            let loss = bound
                .head
                .loss(&mut g, out.penultimate, out.probs, &labels, &LmclParams::default())
                .unwrap();
            g.backward(loss).unwrap();
            black_box(g.len())
        })
    });
}

fn auc(c: &mut Criterion) {
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let labels: Vec<usize> = (0..n).map(|i| (i * 31 % 7 < 3) as usize).collect();
    c.bench_function("roc_auc n=10k", |b| b.iter(|| black_box(roc_auc(&scores, &labels).unwrap().auc)));
}

fn generator(c: &mut Criterion) {
    let cfg = GenConfig {
        n_lesions: 8,
        ..GenConfig::default()
    };
    c.bench_function("generate 8 lesions", |b| b.iter(|| black_box(generate(&cfg, 3).unwrap().dataset.len())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = cnn_step, fusion_step, auc, generator
}
criterion_main!(benches);
