//! Scratch probe: isolate backward cost by graph families.

use std::time::Instant;

use soundmap_core::autodiff::{Tape, Tensor};
use soundmap_core::encoders::{init_transformer, run_transformer_packed, TransformerConfig};
use soundmap_core::params::ParamStore;

fn time_graph(name: &str, reps: usize, f: impl Fn() -> (f64, f64)) {
    let mut fwd = 0.0;
    let mut bwd = 0.0;
    for _ in 0..reps {
        let (a, b) = f();
        fwd += a;
        bwd += b;
    }
    println!("{name}: fwd {:.1}ms bwd {:.1}ms", fwd * 1e3 / reps as f64, bwd * 1e3 / reps as f64);
}

fn main() {
    let cfg = TransformerConfig { layers: 3, width: 512, heads: 8, mlp_hidden: 512 };
    let mut store = ParamStore::new();
    init_transformer(&mut store, "fusion", &cfg, 1);
    let x0 = Tensor::<f32>::from_fn(224, 512, |r, c| ((r * 31 + c) % 17) as f32 * 0.01);
    let offsets: Vec<usize> = (0..=32).map(|i| i * 7).collect();

    time_graph("fusion-3L-packed-attn", 5, || {
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape);
        let t0 = Instant::now();
        let x = tape.constant(x0.clone());
        let y = run_transformer_packed(x, &offsets, &bound, "fusion", &cfg);
        let loss = y.sum_squares();
        let t1 = t0.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let _ = tape.backward(loss);
        (t1, t2.elapsed().as_secs_f64())
    });

    // same stack, one "sample" spanning all rows: far fewer attention nodes
    time_graph("fusion-3L-one-seq", 5, || {
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape);
        let t0 = Instant::now();
        let x = tape.constant(x0.clone());
        let y = run_transformer_packed(x, &[0, 224], &bound, "fusion", &cfg);
        let loss = y.sum_squares();
        let t1 = t0.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let _ = tape.backward(loss);
        (t1, t2.elapsed().as_secs_f64())
    });

    // pure matmul chain with comparable flops (18 matmuls of 224x512x512)
    let w = Tensor::<f32>::from_fn(512, 512, |r, c| ((r + c) % 13) as f32 * 0.001);
    time_graph("matmul-chain-18", 5, || {
        let tape = Tape::<f32>::new();
        let t0 = Instant::now();
        let wv = tape.param(w.clone());
        let mut x = tape.constant(x0.clone());
        for _ in 0..18 {
            x = x.matmul(wv);
        }
        let loss = x.sum_squares();
        let t1 = t0.elapsed().as_secs_f64();
        let t2 = Instant::now();
        let _ = tape.backward(loss);
        (t1, t2.elapsed().as_secs_f64())
    });
}
