use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use kgprompt::eval::{distinct_n, recall_at_k};
use kgprompt::fusion::fuse;
use kgprompt::prompts::DecodeConfig;
use kgprompt_bench::{toy_crs, uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fusion(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = uniform(&mut rng, 128, 64);
    let e = uniform(&mut rng, 16, 64);
    let w = uniform(&mut rng, 64, 64);
    c.bench_function("fuse 128x16 d64", |b| {
        b.iter(|| fuse(black_box(t.view()), black_box(e.view()), black_box(w.view())).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ranked: Vec<Vec<usize>> = (0..1000)
        .map(|_| {
            let mut r: Vec<usize> = (0..200).collect();
            r.shuffle(&mut rng);
            r
        })
        .collect();
    let targets: Vec<Vec<usize>> = (0..1000).map(|_| vec![rng.random_range(0..200)]).collect();
    c.bench_function("recall@50 1000 lists", |b| {
        b.iter(|| recall_at_k(black_box(&ranked), black_box(&targets), 50).unwrap())
    });
    let responses: Vec<Vec<String>> = (0..1000)
        .map(|_| (0..20).map(|_| format!("w{}", rng.random_range(0..300))).collect())
        .collect();
    c.bench_function("dist-4 1000 responses", |b| b.iter(|| distinct_n(black_box(&responses), 4).unwrap()));
}

fn inference(c: &mut Criterion) {
    let (crs, instances) = toy_crs(7);
    let inst = &instances[0];
    let template = crs
        .generate(&inst.context_tokens, &inst.context_entities, DecodeConfig::default())
        .unwrap();
    let mut group = c.benchmark_group("toy model");
    group.sample_size(20);
    group.bench_function("rank catalog", |b| {
        b.iter(|| crs.rank(&inst.context_tokens, &inst.context_entities, &template.tokens).unwrap())
    });
    group.bench_function("respond", |b| {
        b.iter(|| crs.respond(&inst.context_tokens, &inst.context_entities).unwrap())
    });
    group.finish();
}

criterion_group!(benches, fusion, metrics, inference);
criterion_main!(benches);
