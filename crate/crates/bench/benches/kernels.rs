use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array2, Array4};
use rand::Rng;

use echotwin::cdc::{quantize, Codebook, PositionalTable};
use echotwin::nets::{decode, encode, insert_params, GeneratorParams};
use echotwin::tensor::Tape;
use echotwin::transport::{sinkhorn, sort_match};
use echotwin::util::rng_for;

fn bench_quantize(c: &mut Criterion) {
    let mut rng = rng_for(1, "bench", &[]);
    let cb = Codebook::<f32>::init(128, 32, &mut rng);
    let pos = PositionalTable::<f32>::init(16, 32, &mut rng);
    let features = Array4::from_shape_fn((16, 8, 8, 32), |_| rng.gen_range(-1.0..1.0f32));
    c.bench_function("quantize_16x8x8_k128_d32", |b| {
        b.iter(|| quantize(&features.view(), &cb, &pos).unwrap())
    });
}

fn bench_sort_match(c: &mut Criterion) {
    let mut rng = rng_for(2, "bench", &[]);
    let a = Array2::from_shape_fn((64, 32), |_| rng.gen_range(-1.0..1.0f64));
    let b2 = Array2::from_shape_fn((64, 32), |_| rng.gen_range(-1.0..1.0f64));
    c.bench_function("sort_match_j64_d32", |b| {
        b.iter(|| sort_match(&a.view(), &b2.view()).unwrap())
    });
}

fn bench_sinkhorn(c: &mut Criterion) {
    let mut rng = rng_for(3, "bench", &[]);
    let j = 16;
    let cost = Array2::from_shape_fn((j, j), |_| rng.gen_range(0.0..2.0f64));
    let marg = ndarray::Array1::from_elem(j, 1.0 / j as f64);
    for eps in [0.1f64, 0.01] {
        c.bench_with_input(BenchmarkId::new("sinkhorn_j16", eps), &eps, |b, &eps| {
            b.iter(|| sinkhorn(&cost.view(), &marg.view(), &marg.view(), eps, 500, 1e-7).unwrap())
        });
    }
}

fn bench_generator_pass(c: &mut Criterion) {
    let mut rng = rng_for(4, "bench", &[]);
    let gen = GeneratorParams::<f32>::init(&mut rng, 1, 32);
    let clip = Array4::from_shape_fn((16, 64, 64, 1), |_| rng.gen_range(0.0..1.0f32));
    c.bench_function("generator_fwd_bwd_16x64x64", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new(false);
            let cv = tape.constant(clip.clone().into_dyn());
            let eh = insert_params(&mut tape, &gen.encoder, "enc", true);
            let f = encode(&mut tape, cv, &gen.encoder, &eh).unwrap();
            let dh = insert_params(&mut tape, &gen.decoder, "dec", true);
            let out = decode(&mut tape, f, &gen.decoder, &dh).unwrap();
            let loss = tape.mean_all(out);
            tape.backward(loss);
            tape.scalar_value(loss)
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_quantize, bench_sort_match, bench_sinkhorn, bench_generator_pass
}
criterion_main!(benches);
