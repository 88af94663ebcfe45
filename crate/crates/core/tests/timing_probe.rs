//! Rough wall-clock probe for one generator forward+backward at the desk
//! configuration. Ignored by default; used to size the reference budget.

use echotwin::nets::{decode, encode, insert_params, GeneratorParams};
use echotwin::tensor::Tape;
use echotwin::util::rng_for;
use ndarray::Array4;
use rand::Rng;
use std::time::Instant;

#[test]
#[ignore]
fn generator_pass_timing() {
    let mut rng = rng_for(1, "probe", &[]);
    let gen = GeneratorParams::<f32>::init(&mut rng, 1, 32);
    let clip = Array4::<f32>::from_shape_fn((16, 64, 64, 1), |_| rng.gen_range(0.0..1.0));
    // warm-up + timed loop
    for parallel in [false, true] {
        let start = Instant::now();
        let iters = 6;
        for _ in 0..iters {
            let mut tape = Tape::<f32>::new(parallel);
            let cv = tape.constant(clip.clone().into_dyn());
            let eh = insert_params(&mut tape, &gen.encoder, "enc", true);
            let f = encode(&mut tape, cv, &gen.encoder, &eh).unwrap();
            let dh = insert_params(&mut tape, &gen.decoder, "dec", true);
            let out = decode(&mut tape, f, &gen.decoder, &dh).unwrap();
            let loss = tape.mean_all(out);
            tape.backward(loss);
            assert!(tape.grad(eh.vars[0]).is_some());
        }
        let dt = start.elapsed().as_secs_f64() / iters as f64;
        println!("parallel={parallel}: {:.1} ms per enc+dec fwd+bwd", dt * 1e3);
    }
}
