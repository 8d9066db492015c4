//! Scratch probe: step timing and overfit trajectory on the synthetic set.

use std::time::Instant;

use soundmap_core::geodata::{synth_dataset, SynthConfig};
use soundmap_core::retrieval::{evaluate, Direction, EvalSettings};
use soundmap_core::train::{make_batch, train_step, ModelState, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5e-5);
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let a_init: f32 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let b_init: f32 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let alpha: f32 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let beta: f32 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1e-4);

    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig { n: 64, seed: 7, ..Default::default() };
    let (samples, store) = synth_dataset(&synth, dir.path()).unwrap();

    let cfg = TrainConfig {
        batch_size: batch,
        steps,
        warmup_steps: (steps / 10).max(1),
        lr_base: lr,
        seed: 7,
        eval_every: 0,
        alpha,
        beta,
        train_augment: std::env::var("NO_AUG").is_err(),
        ..Default::default()
    };
    let mut state = ModelState::init(&cfg).unwrap();
    *state.params.tensors_mut().get_mut("loss.a_tilde").unwrap() =
        soundmap_core::autodiff::Tensor::scalar(a_init.ln());
    *state.params.tensors_mut().get_mut("loss.b").unwrap() =
        soundmap_core::autodiff::Tensor::scalar(b_init);

    if std::env::var("GRAD_NORMS").is_ok() {
        let batch = make_batch(&samples, &store, &cfg, 0).unwrap();
        let tape = soundmap_core::autodiff::Tape::<f32>::new();
        let bound = state.params.bind(&tape);
        let modal =
            soundmap_core::train::embed_triplet_batch(&tape, &bound, &state.config, &batch).unwrap();
        let (loss, _) = soundmap_core::loss::total_loss(
            &tape, &bound, &modal.image, &modal.audio, &modal.text, cfg.alpha, cfg.beta,
        );
        let grads = tape.backward(loss);
        let by_name = bound.grads_by_name(&grads);
        let mut by_prefix: std::collections::BTreeMap<String, f64> = Default::default();
        for (name, g) in &by_name {
            let prefix = name.split('.').next().unwrap().to_string();
            let sq: f64 = g.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
            *by_prefix.entry(prefix).or_default() += sq;
        }
        for (p, sq) in by_prefix {
            println!("grad norm {p}: {:.6}", sq.sqrt());
        }
    }
    println!("lr={lr} steps={steps} batch={batch} a={a_init} b={b_init} alpha={alpha} beta={beta}");
    if let Some(lvb) = args.get(8).and_then(|s| s.parse::<f32>().ok()) {
        let mut cfg2 = cfg.clone();
        cfg2.model.log_var_bias_init = lvb;
        state = ModelState::init(&cfg2).unwrap();
        *state.params.tensors_mut().get_mut("loss.a_tilde").unwrap() =
            soundmap_core::autodiff::Tensor::scalar(a_init.ln());
        *state.params.tensors_mut().get_mut("loss.b").unwrap() =
            soundmap_core::autodiff::Tensor::scalar(b_init);
        println!("lv_bias={lvb}");
    }
    let t0 = Instant::now();
    for step in 0..cfg.steps {
        let b = make_batch(&samples, &store, &cfg, step).unwrap();
        let (breakdown, cur_lr) = train_step(&mut state, &b, &cfg).unwrap();
        if step % 25 == 0 || step + 1 == cfg.steps {
            println!(
                "step {step:4} lr {cur_lr:.2e} total {:10.4} match_ai {:8.4} pseudo_ai {:7.4} vib_ai {:8.2} [{:.2?}]",
                breakdown.total,
                breakdown.audio_image.matching,
                breakdown.audio_image.pseudo,
                breakdown.audio_image.vib,
                t0.elapsed() / (step as u32 + 1)
            );
        }
    }
    println!("total wall: {:.1?}", t0.elapsed());

    for (dir_, name) in [(Direction::I2A, "I2A"), (Direction::A2I, "A2I")] {
        for zoom in [1u32, 3, 5] {
            let settings = EvalSettings { direction: dir_, zoom, use_text: false, use_metadata: true };
            let r = evaluate(&state, &samples, &store, &settings).unwrap();
            println!("{name} zl={zoom} R@10%={:.3} MdR={:.1}", r.r_at_10pct, r.mdr);
        }
    }
    // sigma magnitudes
    let embs = soundmap_core::retrieval::embed_split(&state, &samples, &store, 1, true).unwrap();
    let mean_sigma: f64 =
        embs.iter().map(|(i, a, t)| (i.sigma_l1() + a.sigma_l1() + t.sigma_l1()) / 3.0).sum::<f64>()
            / embs.len() as f64;
    println!("mean ||sigma||_1 = {mean_sigma:.4}");

    // distance diagnostics: positive vs negative CSD, train views vs eval views
    use soundmap_core::loss::csd;
    let diag = |name: &str, img: &[soundmap_core::encoders::GaussianEmbedding],
                aud: &[soundmap_core::encoders::GaussianEmbedding]| {
        let n = img.len();
        let mut pos = 0.0;
        let mut neg = 0.0;
        let mut negcount = 0usize;
        for i in 0..n {
            for j in 0..n {
                let d = csd(&img[i], &aud[j]);
                if i == j {
                    pos += d;
                } else {
                    neg += d;
                    negcount += 1;
                }
            }
        }
        println!("{name}: mean pos d {:.3}  mean neg d {:.3}", pos / n as f64, neg / negcount as f64);
    };
    let img_eval: Vec<_> = embs.iter().map(|(i, _, _)| i.clone()).collect();
    let aud_eval: Vec<_> = embs.iter().map(|(_, a, _)| a.clone()).collect();
    diag("eval views (meta on)", &img_eval, &aud_eval);

    // training-style views of the same first 32 samples, via make_batch at a fresh step
    let batch = make_batch(&samples, &store, &cfg, 12345).unwrap();
    let tape = soundmap_core::autodiff::Tape::<f32>::new();
    let bound = state.params.bind_frozen(&tape);
    let modal =
        soundmap_core::train::embed_triplet_batch(&tape, &bound, &state.config, &batch).unwrap();
    let img_train = modal.image.to_embeddings();
    let aud_train = modal.audio.to_embeddings();
    diag("train views (dropout)", &img_train, &aud_train);

    // loss scalars
    let a = state.params.get("loss.a_tilde").item().exp();
    let b = state.params.get("loss.b").item();
    println!("a = {a:.4}  b = {b:.4}");
}
