//! Scratch probe: raw kernel throughput and per-phase step timing.

use std::time::Instant;

use soundmap_core::autodiff::{Tape, Tensor};
use soundmap_core::geodata::{synth_dataset, SynthConfig};
use soundmap_core::train::{embed_triplet_batch, make_batch, ModelState, TrainConfig};

fn bench_matmul(m: usize, k: usize, n: usize, reps: usize) {
    let a = Tensor::<f32>::from_fn(m, k, |r, c| ((r * 31 + c) % 17) as f32 * 0.1);
    let b = Tensor::<f32>::from_fn(k, n, |r, c| ((r * 13 + c) % 23) as f32 * 0.05);
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let tape = Tape::<f32>::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let c = av.matmul(bv);
        sink += c.value().get(0, 0);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let gflops = (m * k * n) as f64 / dt / 1e9;
    println!("matmul {m}x{k}x{n}: {:.3} ms, {gflops:.2} Gmul-add/s (sink {sink})", dt * 1e3);
}

fn bench_raw(reps: usize) {
    use soundmap_core::autodiff::Tensor;
    let a = Tensor::<f32>::from_fn(224, 512, |r, c| ((r * 31 + c) % 17) as f32 * 0.1);
    let b = Tensor::<f32>::from_fn(512, 512, |r, c| ((r * 13 + c) % 23) as f32 * 0.05);
    let t0 = Instant::now();
    let tape = Tape::<f32>::new();
    let (av, bv) = (tape.constant(a.clone()), tape.param(b.clone()));
    let mut sink = 0.0;
    for _ in 0..reps {
        let c = av.matmul(bv);
        sink += c.value().get(0, 0);
    }
    println!("fwd matmul via tape: {:.3} ms (sink {sink})", t0.elapsed().as_secs_f64()*1e3/reps as f64);
    // time one backward including both vjps
    let tape = Tape::<f32>::new();
    let (av, bv) = (tape.param(a), tape.param(b));
    let mut c = av.matmul(bv);
    for _ in 0..reps-1 { c = av.matmul(bv); }
    let loss = c.sum();
    let t0 = Instant::now();
    let _g = tape.backward(loss);
    println!("bwd of {} matmuls: {:.3} ms/matmul", reps, t0.elapsed().as_secs_f64()*1e3/reps as f64);
}

fn main() {
    println!("features: fma={} avx2={}", cfg!(target_feature="fma"), cfg!(target_feature="avx2"));
    bench_raw(40);
    bench_matmul(224, 512, 512, 50);
    bench_matmul(128, 768, 128, 50);
    bench_matmul(512, 128, 256, 50);
    bench_matmul(7, 512, 512, 200);

    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { n: 64, seed: 7, ..Default::default() };
    let (samples, store) = synth_dataset(&synth, dir.path()).unwrap();
    let cfg = TrainConfig { seed: 7, ..Default::default() };
    let state = ModelState::init(&cfg).unwrap();

    let t0 = Instant::now();
    let batch = make_batch(&samples, &store, &cfg, 0).unwrap();
    println!("make_batch: {:.1?}", t0.elapsed());

    for _ in 0..3 {
        let t1 = Instant::now();
        let tape = Tape::<f32>::new();
        let bound = state.params.bind(&tape);
        let t_bind = t1.elapsed();
        let modal = embed_triplet_batch(&tape, &bound, &state.config, &batch).unwrap();
        let t_fwd = t1.elapsed();
        let (loss, _) = soundmap_core::loss::total_loss(
            &tape, &bound, &modal.image, &modal.audio, &modal.text, 0.1, 1e-4,
        );
        let t_loss = t1.elapsed();
        let grads = tape.backward(loss);
        let t_bwd = t1.elapsed();
        let by_name = bound.grads_by_name(&grads);
        let t_collect = t1.elapsed();
        println!(
            "bind {:.1?} fwd {:.1?} loss {:.1?} bwd {:.1?} collect {:.1?} nodes {} grad_tensors {}",
            t_bind,
            t_fwd - t_bind,
            t_loss - t_fwd,
            t_bwd - t_loss,
            t_collect - t_bwd,
            tape.len(),
            by_name.len(),
        );
    }
}
