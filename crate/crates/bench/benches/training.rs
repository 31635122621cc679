use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tve_bench::{explainer, images, target};
use tve_core::explainer::{pretrain_loss, ExplainerModel};
use tve_core::models::Module;
use tve_core::{GridSpec, Image, Tape};

fn explainer_step(c: &mut Criterion) {
    let grid = GridSpec::desk();
    let m = target(grid, 4, 0);
    let e = explainer(grid, 0);
    let imgs = images(&grid, 16, 0);
    let refs: Vec<&Image> = imgs.iter().collect();
    let patches: Vec<Vec<usize>> = (0..16).map(|i| (0..8).map(|k| (i * 8 + k * 7) % 64).collect()).collect();

    c.bench_function("explainer_forward_backward_16x8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = e.record(&mut tape);
            let out = e.forward_tape(&mut tape, &vars, black_box(&refs), &patches).unwrap();
            let zero = tape.constant(tve_core::Tensor::zeros(tape.value(out).dims()));
            let loss = tape.mse(out, zero).unwrap();
            tape.backward(loss).unwrap()
        })
    });

    let one: &ExplainerModel = &e;
    c.bench_function("pretrain_loss_8_patches", |b| b.iter(|| pretrain_loss(one, &m.encoder, black_box(&imgs[0]), &patches[0]).unwrap()));
}

criterion_group!(benches, explainer_step);
criterion_main!(benches);
