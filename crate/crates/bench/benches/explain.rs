use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tve_bench::{explainer, images, target};
use tve_core::attribution::{compute_meta_attribution, exact_heatmap, mc_attribution, transfer_explain};
use tve_core::eval::fidelity_curves;
use tve_core::{rng, GridSpec};

fn amortized(c: &mut Criterion) {
    let grid = GridSpec::desk();
    let e = explainer(grid, 0);
    let img = &images(&grid, 1, 0)[0];
    c.bench_function("explain_forward", |b| b.iter(|| e.explain_forward(black_box(img)).unwrap()));

    let meta = e.explain_forward(img).unwrap();
    let mut group = c.benchmark_group("transfer_explain");
    for classes in [10, 20, 1000] {
        let m = target(grid, classes, 1);
        group.bench_with_input(BenchmarkId::from_parameter(classes), &m, |b, m| b.iter(|| transfer_explain(black_box(&meta), &m.head, 0).unwrap()));
    }
    group.finish();
}

fn exact(c: &mut Criterion) {
    let mut group = c.benchmark_group("exact_heatmap");
    group.sample_size(20);
    for p in [4, 8] {
        let grid = GridSpec::new(32, 32 / p, p, 2).unwrap();
        let m = target(grid, 10, 2);
        let img = images(&grid, 1, 1).remove(0);
        group.bench_with_input(BenchmarkId::from_parameter(p), &img, |b, img| b.iter(|| exact_heatmap(&m, black_box(img), 0).unwrap()));
    }
    group.finish();

    let grid = GridSpec::desk();
    let m = target(grid, 10, 3);
    let img = images(&grid, 1, 2).remove(0);
    c.bench_function("meta_attribution", |b| b.iter(|| compute_meta_attribution(&m.encoder, black_box(&img)).unwrap()));
    c.bench_function("mc_attribution_16", |b| {
        let mut r = rng::stream(4, &[]);
        b.iter(|| mc_attribution(&m, black_box(&img), grid.patch_at(27), 0, 16, &mut r).unwrap())
    });
}

fn fidelity(c: &mut Criterion) {
    let grid = GridSpec::desk();
    let m = target(grid, 10, 5);
    let img = images(&grid, 1, 3).remove(0);
    let hm = exact_heatmap(&m, &img, 0).unwrap();
    c.bench_function("fidelity_curves", |b| b.iter(|| fidelity_curves(&m, black_box(&hm), &img, 0).unwrap()));
}

criterion_group!(benches, amortized, exact, fidelity);
criterion_main!(benches);
