//! Rough throughput probe for the convolution engine.
use ndarray::Array4;
use semcom::nn::{Activation, Conv2d, Layer, Stack};
use std::time::Instant;

fn main() {
    let stack = Stack {
        layers: vec![
            Layer::Conv(Conv2d::init(3, 16, 2, 1), Activation::LeakyRelu(0.2)),
            Layer::Conv(Conv2d::init(16, 16, 2, 2), Activation::LeakyRelu(0.2)),
            Layer::Conv(Conv2d::init(16, 16, 1, 3), Activation::LeakyRelu(0.2)),
            Layer::Conv(Conv2d::init(16, 16, 1, 4), Activation::LeakyRelu(0.2)),
            Layer::Conv(Conv2d::init(16, 8, 1, 5), Activation::Linear),
        ],
    };
    let batch = 50usize;
    let x = Array4::<f64>::from_elem((batch, 3, 64, 64), 0.3);
    // warmup
    let tr = stack.forward(x.clone());
    let gy = tr.output().clone();
    let _ = stack.backward_input(&tr, gy.clone());

    let iters = 20;
    let t0 = Instant::now();
    for _ in 0..iters {
        let tr = stack.forward(x.clone());
        let _ = stack.backward_input(&tr, gy.clone());
    }
    let dt = t0.elapsed().as_secs_f64();
    // ~2.5M MACs/img fwd, x2 for fwd+bwd, x2 flop/MAC
    let flop = (iters * batch) as f64 * 2.5e6 * 2.0 * 2.0;
    println!(
        "fwd+bwd_input: {:.3} s/iter (batch {batch}), ~{:.2} GFLOP/s",
        dt / iters as f64,
        flop / dt / 1e9
    );
}
