use std::collections::BTreeMap;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udnmt::model::{CacheIds, DecodeMode, ModelConfig, Transformer};
use udnmt::numerics::{Graph, Tensor};
use udnmt::tfidf::{topic_keywords, TfidfConfig};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (random(&mut rng, &[n, n]), random(&mut rng, &[n, n]));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let m: Transformer<f32> = Transformer::new(cfg, 200, 200, 1).unwrap();
    let source: Vec<usize> = (4..24).collect();
    let target: Vec<usize> = (30..50).collect();
    let topic: Vec<usize> = (60..85).collect();
    let context: Vec<usize> = (90..110).collect();
    let cache = CacheIds {
        topic: &topic,
        context: &context,
    };

    c.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let b = m.bind(&mut g);
            let ce = m.score(&mut g, &b, &source, &target, cache, None).unwrap();
            black_box(g.backward(ce.loss).unwrap());
        })
    });
    c.bench_function("greedy_decode", |bench| {
        bench.iter(|| black_box(m.decode(&source, cache, DecodeMode::Greedy, 30).unwrap()))
    });
    c.bench_function("beam4_decode", |bench| {
        bench.iter(|| black_box(m.decode(&source, cache, DecodeMode::Beam(4), 30).unwrap()))
    });
}

fn tfidf(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut histories: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for u in 0..100 {
        let sentences = (0..20)
            .map(|_| (0..12).map(|_| format!("w{}", rng.gen_range(0..500))).collect())
            .collect();
        histories.insert(format!("u{u}"), sentences);
    }
    let cfg = TfidfConfig::default();
    c.bench_function("topic_keywords_100_users", |bench| {
        bench.iter(|| black_box(topic_keywords("u0", &histories["u0"], &histories, &cfg)))
    });
}

criterion_group!(benches, matmul, model, tfidf);
criterion_main!(benches);
