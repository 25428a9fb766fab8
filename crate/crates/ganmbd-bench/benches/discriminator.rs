//! Multi-branch discriminator forward pass across branch counts: the wall
//! clock should shrink as parameters drop with 1/N.

use criterion::{criterion_group, criterion_main, Criterion};
use ganmbd::networks::{Discriminator, MultiBranchDiscriminatorSpec};
use ganmbd::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn benches(c: &mut Criterion) {
    let side = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(vec![2, 3, side, side], 1.0, &mut rng);

    for branches in [1usize, 2, 4, 8] {
        let spec = MultiBranchDiscriminatorSpec {
            branches,
            base_channels: 32,
            n_layers: 4,
            num_classes: 3,
            image_side: side,
            in_channels: 3,
            head_channels: 32,
            max_channels: 256,
        };
        let mut store = ParamStore::new();
        let disc = Discriminator::build(spec, &mut store, "d", &mut rng).unwrap();
        c.bench_function(&format!("disc_forward_n{branches}"), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let xv = tape.constant(x.clone());
                black_box(disc.forward(&tape, &store, xv).unwrap());
            })
        });
    }
}

criterion_group!(discriminator, benches);
criterion_main!(discriminator);
