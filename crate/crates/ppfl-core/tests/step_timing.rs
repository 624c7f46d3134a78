//! Throughput probe for one training step at desk scale. Ignored by
//! default; run with `cargo test -p ppfl-core --test step_timing -- --ignored --nocapture`.

use ppfl_core::autodiff::Tape;
use ppfl_core::model::{batch_loss, darnn_forward, Batch, ModelDims, ModelSpec, PartitionScheme};
use ppfl_core::rng::{substream, StreamDomain};
use rand::Rng;
use std::time::Instant;

#[test]
#[ignore]
fn transcendental_throughput() {
    let xs: Vec<f64> = (0..4096).map(|i| (i as f64 / 2048.0) - 1.0).collect();
    let mut acc = 0.0;
    let n = 2000;
    let t = Instant::now();
    for _ in 0..n {
        for x in &xs {
            acc += libm::tanh(*x);
        }
    }
    println!("libm::tanh {:.2} ns/call", t.elapsed().as_secs_f64() / (n as f64 * 4096.0) * 1e9);
    let t = Instant::now();
    for _ in 0..n {
        for x in &xs {
            acc += x.tanh();
        }
    }
    println!("std tanh   {:.2} ns/call", t.elapsed().as_secs_f64() / (n as f64 * 4096.0) * 1e9);
    let t = Instant::now();
    for _ in 0..n {
        for x in &xs {
            acc += libm::exp(*x);
        }
    }
    println!("libm::exp  {:.2} ns/call", t.elapsed().as_secs_f64() / (n as f64 * 4096.0) * 1e9);
    let t = Instant::now();
    for _ in 0..n {
        for x in &xs {
            acc += x.exp();
        }
    }
    println!("std exp    {:.2} ns/call", t.elapsed().as_secs_f64() / (n as f64 * 4096.0) * 1e9);
    assert!(acc.is_finite());
}

#[test]
#[ignore]
fn desk_scale_step_throughput() {
    let dims = ModelDims::desk();
    let spec = ModelSpec::new(dims, PartitionScheme::EncoderShared);
    let mut rng = substream(1, StreamDomain::SharedInit, 0, 0);
    let mut theta = spec.init_shared(&mut rng);
    theta.extend(spec.init_personal(&mut rng));

    let b = 64;
    let batch = Batch {
        size: b,
        window: dims.window,
        features: dims.features,
        x: (0..b * dims.window * dims.features).map(|_| rng.random_range(-1.0..1.0)).collect(),
        y_hist: (0..b * dims.window).map(|_| rng.random_range(-1.0..1.0)).collect(),
        y_target: (0..b).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };

    let mut tape = Tape::new();
    let mut grad = Vec::new();
    // Warm up the arenas.
    for _ in 0..3 {
        tape.reset();
        let leaves = spec.push_leaves(&mut tape, &theta).unwrap();
        let out = darnn_forward(&mut tape, &spec, &leaves, &batch).unwrap();
        let loss = batch_loss(&mut tape, out, &batch).unwrap();
        tape.backward(loss).unwrap();
        spec.extract_gradient(&tape, &leaves, &mut grad);
    }

    let steps = 100;
    let start = Instant::now();
    for _ in 0..steps {
        tape.reset();
        let leaves = spec.push_leaves(&mut tape, &theta).unwrap();
        let out = darnn_forward(&mut tape, &spec, &leaves, &batch).unwrap();
        let loss = batch_loss(&mut tape, out, &batch).unwrap();
        tape.backward(loss).unwrap();
        spec.extract_gradient(&tape, &leaves, &mut grad);
        theta[0] += 1e-12; // defeat any dead-code elimination
    }
    let dt = start.elapsed().as_secs_f64();
    let per_step = dt / steps as f64;
    println!("params: {}", spec.total_len());
    println!("tensors per graph: {}", tape.num_tensors());
    println!("per fwd+bwd step (B=64): {:.3} ms", per_step * 1e3);
    println!("desk run (200 rounds x 4 clients x 5 steps): {:.1} s", per_step * 4000.0);
}
