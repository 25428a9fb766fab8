//! Forward and backward timing of the convolution primitive the whole
//! training loop is built on.

use criterion::{criterion_group, criterion_main, Criterion};
use ganmbd::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn conv_case(c: &mut Criterion, name: &str, batch: usize, ch: usize, side: usize, k: usize, stride: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(vec![batch, ch, side, side], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(vec![ch, ch, k, k], 0.02, &mut rng);
    let mut store = ParamStore::new();
    let wid = store.add("w", w);
    let pad = k / 2;

    c.bench_function(&format!("conv2d_fwd_{name}"), |b| {
        b.iter(|| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(&store, wid);
            let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
            black_box(tape.value(y));
        })
    });

    c.bench_function(&format!("conv2d_fwd_bwd_{name}"), |b| {
        b.iter(|| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(&store, wid);
            let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
            let loss = tape.mean(y);
            black_box(tape.backward(loss, &store).unwrap());
        })
    });
}

fn benches(c: &mut Criterion) {
    conv_case(c, "16ch_32px_k3", 4, 16, 32, 3, 1);
    conv_case(c, "64ch_16px_k4s2", 4, 64, 16, 4, 2);
}

criterion_group!(kernels, benches);
criterion_main!(kernels);
