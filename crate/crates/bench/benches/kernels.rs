use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use idstyle_bench::{embeddings, feature_map, uniform};
use idstyle_core::autograd::Tape;
use idstyle_core::encoders::FeatureMap;
use idstyle_core::losses::{contextual_similarity, ContextualConfig};
use idstyle_core::metrics::kid;

fn conv2d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for &side in &[32usize, 64] {
        let x = uniform(&[4, 32, side, side], 1);
        let w = uniform(&[32, 32, 3, 3], 2);
        g.bench_with_input(BenchmarkId::new("fwd_bwd", side), &side, |b, _| {
            b.iter(|| {
                let t = Tape::<f32>::new();
                let (xv, wv) = (t.var(x.clone()), t.var(w.clone()));
                let y = xv.conv2d(wv, None).sum();
                black_box(t.backward(y));
            })
        });
    }
    g.finish();
}

fn contextual(c: &mut Criterion) {
    let cfg = ContextualConfig::default();
    let mut g = c.benchmark_group("contextual_similarity");
    for &(ch, side) in &[(256usize, 16usize), (512, 8)] {
        let a = FeatureMap { data: feature_map(ch, side, side, 3), tap_name: "relu3_2".into() };
        let r = FeatureMap { data: feature_map(ch, side, side, 4), tap_name: "relu3_2".into() };
        g.bench_function(BenchmarkId::new(format!("c{ch}"), side), |b| {
            b.iter(|| black_box(contextual_similarity(&a, &r, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn kid_bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("kid");
    for &n in &[64usize, 256] {
        let (x, y) = (embeddings(n, 256, 5), embeddings(n, 256, 6));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| black_box(kid(&x, &y).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, conv2d, contextual, kid_bench);
criterion_main!(benches);
