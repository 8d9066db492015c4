//! Minimal pre-LN transformer encoder blocks over row-sequences.

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, concat_rows, Elem, Var};
use crate::params::{BoundParams, ParamStore};
use crate::rng::stream;

/// Shape of one transformer stack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

const LN_EPS: f64 = 1e-5;

/// Register the parameters of a stack under `prefix`.
pub fn init_transformer(store: &mut ParamStore, prefix: &str, cfg: &TransformerConfig, seed: u64) {
    assert!(cfg.width % cfg.heads == 0, "width {} not divisible by heads {}", cfg.width, cfg.heads);
    for layer in 0..cfg.layers {
        let p = format!("{prefix}.block{layer}");
        for ln in ["ln1", "ln2"] {
            store.insert(&format!("{p}.{ln}.gamma"), crate::autodiff::Tensor::filled(1, cfg.width, 1.0));
            store.insert(&format!("{p}.{ln}.beta"), crate::autodiff::Tensor::zeros(1, cfg.width));
        }
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.attn.{w}"), xavier(cfg.width, cfg.width, seed, &format!("{p}.attn.{w}")));
            store.insert(&format!("{p}.attn.{w}.b"), crate::autodiff::Tensor::zeros(1, cfg.width));
        }
        store.insert(&format!("{p}.mlp.w1"), xavier(cfg.width, cfg.mlp_hidden, seed, &format!("{p}.mlp.w1")));
        store.insert(&format!("{p}.mlp.w1.b"), crate::autodiff::Tensor::zeros(1, cfg.mlp_hidden));
        store.insert(&format!("{p}.mlp.w2"), xavier(cfg.mlp_hidden, cfg.width, seed, &format!("{p}.mlp.w2")));
        store.insert(&format!("{p}.mlp.w2.b"), crate::autodiff::Tensor::zeros(1, cfg.width));
    }
}

/// Xavier-uniform init, seeded per parameter name.
pub fn xavier(rows: usize, cols: usize, seed: u64, name: &str) -> crate::autodiff::Tensor<f32> {
    use rand::Rng;
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = stream(seed, &format!("init/{name}"));
    crate::autodiff::Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound) as f32)
}

/// Run the stack over a single `[T, width]` sequence.
pub fn run_transformer<'t, E: Elem>(
    x: Var<'t, E>,
    bound: &BoundParams<'t, E>,
    prefix: &str,
    cfg: &TransformerConfig,
) -> Var<'t, E> {
    let t = x.shape().0;
    run_transformer_packed(x, &[0, t], bound, prefix, cfg)
}

/// Run the stack over several sequences packed row-wise into one matrix.
///
/// `offsets` has length `B + 1`; sample `b` occupies rows
/// `offsets[b]..offsets[b+1]`. Projections and MLPs batch across the whole
/// pack; attention stays within each sample's row range.
pub fn run_transformer_packed<'t, E: Elem>(
    mut x: Var<'t, E>,
    offsets: &[usize],
    bound: &BoundParams<'t, E>,
    prefix: &str,
    cfg: &TransformerConfig,
) -> Var<'t, E> {
    assert!(offsets.len() >= 2 && offsets[0] == 0, "offsets must start at 0");
    assert_eq!(*offsets.last().unwrap(), x.shape().0, "offsets must cover all rows");
    for layer in 0..cfg.layers {
        let p = format!("{prefix}.block{layer}");
        let normed = x.layernorm(
            bound.var(&format!("{p}.ln1.gamma")),
            bound.var(&format!("{p}.ln1.beta")),
            E::from_f64(LN_EPS),
        );
        x = x.add(packed_attention(normed, offsets, bound, &p, cfg.heads));
        let normed = x.layernorm(
            bound.var(&format!("{p}.ln2.gamma")),
            bound.var(&format!("{p}.ln2.beta")),
            E::from_f64(LN_EPS),
        );
        let h = normed
            .matmul(bound.var(&format!("{p}.mlp.w1")))
            .add_row_broadcast(bound.var(&format!("{p}.mlp.w1.b")))
            .silu()
            .matmul(bound.var(&format!("{p}.mlp.w2")))
            .add_row_broadcast(bound.var(&format!("{p}.mlp.w2.b")));
        x = x.add(h);
    }
    x
}

fn packed_attention<'t, E: Elem>(
    x: Var<'t, E>,
    offsets: &[usize],
    bound: &BoundParams<'t, E>,
    prefix: &str,
    heads: usize,
) -> Var<'t, E> {
    let width = x.shape().1;
    let dh = width / heads;
    let proj = |w: &str| {
        x.matmul(bound.var(&format!("{prefix}.attn.{w}")))
            .add_row_broadcast(bound.var(&format!("{prefix}.attn.{w}.b")))
    };
    let q = proj("wq");
    let k = proj("wk");
    let v = proj("wv");
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
    let mut per_sample = Vec::with_capacity(offsets.len() - 1);
    for b in 0..offsets.len() - 1 {
        let (o0, o1) = (offsets[b], offsets[b + 1]);
        let qb = q.slice_rows(o0, o1);
        let kb = k.slice_rows(o0, o1);
        let vb = v.slice_rows(o0, o1);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = qb.slice_cols(c0, c1);
            let kh = kb.slice_cols(c0, c1);
            let vh = vb.slice_cols(c0, c1);
            let attn = qh.matmul_nt(kh).mul_scalar(scale).softmax_rows();
            outs.push(attn.matmul(vh));
        }
        per_sample.push(if heads == 1 { outs[0] } else { concat_cols(&outs) });
    }
    let merged = if per_sample.len() == 1 { per_sample[0] } else { concat_rows(&per_sample) };
    merged
        .matmul(bound.var(&format!("{prefix}.attn.wo")))
        .add_row_broadcast(bound.var(&format!("{prefix}.attn.wo.b")))
}
