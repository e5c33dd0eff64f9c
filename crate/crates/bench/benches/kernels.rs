use atrium_bench::{phantom, shifted};
use atrium_core::autodiff::{Graph, Tensor};
use atrium_core::labeling::label_components;
use atrium_core::metrics::{boundary_distances, overlap_metrics};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let input = Tensor::new(
        vec![1, 8, 32, 32, 32],
        (0..8 * 32 * 32 * 32).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect(),
    )
    .unwrap();
    let weight = Tensor::new(
        vec![8, 8, 3, 3, 3],
        (0..8 * 8 * 27).map(|i| ((i % 13) as f32 - 6.0) / 60.0).collect(),
    )
    .unwrap();
    c.bench_function("conv3d 8->8 32^3 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g.param(input.clone());
            let w = g.param(weight.clone());
            let y = g.conv3d(x, w, None, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(w).map(|d| d[0]))
        })
    });
}

fn metrics(c: &mut Criterion) {
    let (_, truth) = phantom(3);
    let pred = shifted(&truth);
    c.bench_function("overlap metrics 48^3", |b| {
        b.iter(|| overlap_metrics(black_box(&pred), &truth).unwrap())
    });
    c.bench_function("boundary distances 48^3", |b| {
        b.iter(|| boundary_distances(black_box(&pred), &truth, [1.0; 3]).unwrap())
    });
    c.bench_function("component labeling 48^3", |b| {
        b.iter(|| label_components(black_box(&truth)))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, metrics
}
criterion_main!(benches);
