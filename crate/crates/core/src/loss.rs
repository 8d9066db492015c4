//! The probabilistic contrastive objective.
//!
//! For Gaussian embeddings `Z_p`, `Z_q`, the closed-form sampled distance is
//!
//! ```text
//! d(Z_p, Z_q) = ||mu_p - mu_q||_2^2 + ||sigma_p^2 + sigma_q^2||_1
//! ```
//!
//! The matching loss scores that distance through a learnable affine map and
//! a log-sigmoid, attracting positive pairs and repelling negatives. Within
//! a batch, any negative at distance <= the anchor's positive distance is
//! mined as pseudo-positive and additionally contributes an alpha-weighted
//! positive term; it stays in the negative term of the matching loss, so
//! mining can never silence the repulsive pressure. A KL regularizer to the
//! standard normal keeps variances from collapsing. The deterministic
//! InfoNCE baseline trains the same three modality pairs on cosine
//! similarities with a learnable temperature.
//!
//! Matching losses average over the `B^2` pairs of the batch, so magnitudes
//! are batch-size invariant. Pseudo-positive mining runs on detached
//! distances: selection never backpropagates.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Elem, Tape, Tensor, Var};
use crate::encoders::GaussianEmbedding;
use crate::params::{BoundParams, ParamStore};

/// Loss hyperparameters. `a` stays positive by parameterizing `a = exp(a~)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossParams {
    pub a_init: f32,
    pub b_init: f32,
    /// Weight of the pseudo-positive term.
    pub alpha: f32,
    /// Weight of the VIB regularizer.
    pub beta: f32,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { a_init: 10.0, b_init: 0.0, alpha: 0.1, beta: 1e-4 }
    }
}

/// Register the learnable scalars: `a~ = ln a`, `b`, and the InfoNCE
/// temperature (as a log logit scale, CLIP-style init `ln(1/0.07)`).
pub fn init_loss_params(store: &mut ParamStore, params: &LossParams) {
    assert!(params.a_init > 0.0, "a must initialize positive");
    store.insert("loss.a_tilde", Tensor::scalar(params.a_init.ln()));
    store.insert("loss.b", Tensor::scalar(params.b_init));
    store.insert("loss.logit_scale", Tensor::scalar((1.0f32 / 0.07).ln()));
}

/// Closed-form sampled distance between two Gaussian embeddings.
pub fn csd(zp: &GaussianEmbedding, zq: &GaussianEmbedding) -> f64 {
    assert_eq!(zp.dim(), zq.dim(), "csd dimension mismatch: {} vs {}", zp.dim(), zq.dim());
    let mut mean_sq = 0.0f64;
    let mut var_l1 = 0.0f64;
    for j in 0..zp.dim() {
        let dm = zp.mu[j] as f64 - zq.mu[j] as f64;
        mean_sq += dm * dm;
        var_l1 += ((zp.log_var[j] as f64).exp() + (zq.log_var[j] as f64).exp()).abs();
    }
    mean_sq + var_l1
}

/// Matching loss for one pair at distance `d` with indicator `w`.
pub fn match_loss(d: f64, w: bool, a: f64, b: f64) -> f64 {
    let logit = if w { -a * d + b } else { a * d - b };
    -log_sigmoid(logit)
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// A batch of Gaussian embeddings on the tape: `mu`, `log_var` both `[B, d]`.
#[derive(Clone, Copy)]
pub struct GaussianBatch<'t, E: Elem = f32> {
    pub mu: Var<'t, E>,
    pub log_var: Var<'t, E>,
}

impl<'t, E: Elem> GaussianBatch<'t, E> {
    pub fn batch_size(&self) -> usize {
        self.mu.shape().0
    }

    /// Detach the embeddings into value-level form.
    pub fn to_embeddings(&self) -> Vec<GaussianEmbedding> {
        let mu = self.mu.value();
        let lv = self.log_var.value();
        (0..mu.rows())
            .map(|r| {
                GaussianEmbedding::new(
                    mu.row_slice(r).iter().map(|&x| x.to_f64() as f32).collect(),
                    lv.row_slice(r).iter().map(|&x| x.to_f64() as f32).collect(),
                )
            })
            .collect()
    }
}

/// All-pairs CSD matrix: `D[p][q] = csd(P_p, Q_q)`, differentiable.
pub fn csd_matrix<'t, E: Elem>(
    tape: &'t Tape<E>,
    p: &GaussianBatch<'t, E>,
    q: &GaussianBatch<'t, E>,
) -> Var<'t, E> {
    let b = p.batch_size();
    assert_eq!(p.mu.shape().1, q.mu.shape().1, "csd dimension mismatch");
    assert_eq!(q.batch_size(), b, "batch size mismatch");
    let cross = p.mu.matmul_nt(q.mu).mul_scalar(E::from_f64(-2.0));
    let sq_p = p.mu.mul(p.mu).row_sum();
    let sq_q = q.mu.mul(q.mu).row_sum();
    let sv_p = p.log_var.exp().row_sum();
    let sv_q = q.log_var.exp().row_sum();
    let _ = tape;
    cross
        .add_col_broadcast(sq_p.add(sv_p))
        .add_row_broadcast(sq_q.add(sv_q).transpose())
}

/// Pseudo-positive mask: for each anchor row `p` with positive `q`, every
/// `q' != q` with `D[p][q'] <= D[p][q]` is marked. `w` must contain exactly
/// one positive per row.
pub fn mine_pseudo_positives(d: &Tensor<f32>, w: &Tensor<f32>) -> Tensor<f32> {
    let (rows, cols) = d.shape();
    assert_eq!(w.shape(), (rows, cols), "indicator shape mismatch");
    let mut mask = vec![0.0f32; rows * cols];
    for p in 0..rows {
        let positives: Vec<usize> =
            (0..cols).filter(|&q| w.get(p, q) != 0.0).collect();
        assert_eq!(positives.len(), 1, "row {p} must have exactly one positive");
        let q = positives[0];
        let d_pos = d.get(p, q);
        for q2 in 0..cols {
            if q2 != q && d.get(p, q2) <= d_pos {
                mask[p * cols + q2] = 1.0;
            }
        }
    }
    Tensor::new(rows, cols, mask)
}

/// Per-pair scalar summands of the objective.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PairLoss {
    pub matching: f64,
    pub pseudo: f64,
    pub vib: f64,
}

/// One training step's loss terms for the three modality pairs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub audio_text: PairLoss,
    pub audio_image: PairLoss,
    pub image_text: PairLoss,
    pub total: f64,
}

/// KL to the standard normal, averaged over the batch:
/// `0.5 * sum_j (mu_j^2 + sigma_j^2 - log sigma_j^2 - 1) / B`.
pub fn vib_term<'t, E: Elem>(z: &GaussianBatch<'t, E>) -> Var<'t, E> {
    let b = z.batch_size() as f64;
    let var = z.log_var.exp();
    z.mu
        .mul(z.mu)
        .add(var)
        .sub(z.log_var)
        .add_scalar(E::from_f64(-1.0))
        .sum()
        .mul_scalar(E::from_f64(0.5 / b))
}

/// Value-level VIB for a single embedding (used by tests and reports).
pub fn vib_loss(z: &GaussianEmbedding) -> f64 {
    let mut acc = 0.0f64;
    for j in 0..z.dim() {
        let mu = z.mu[j] as f64;
        let lv = z.log_var[j] as f64;
        acc += mu * mu + lv.exp() - lv - 1.0;
    }
    0.5 * acc
}

struct PairTerms<'t, E: Elem> {
    scalar: Var<'t, E>,
    matching: f64,
    pseudo: f64,
}

/// Matching + alpha-weighted pseudo-positive loss for one modality pair with
/// aligned positives on the diagonal.
fn pair_matching<'t, E: Elem>(
    tape: &'t Tape<E>,
    p: &GaussianBatch<'t, E>,
    q: &GaussianBatch<'t, E>,
    a: Var<'t, E>,
    b: Var<'t, E>,
    alpha: f32,
) -> PairTerms<'t, E> {
    let bsz = p.batch_size();
    let d = csd_matrix(tape, p, q);

    // Mining runs on detached distances.
    let d_val = d.value();
    let d_f32 = Tensor::new(bsz, bsz, d_val.data().iter().map(|&x| x.to_f64() as f32).collect());
    let eye = Tensor::from_fn(bsz, bsz, |r, c| if r == c { 1.0f32 } else { 0.0 });
    let pseudo = mine_pseudo_positives(&d_f32, &eye);

    let cast = |t: &Tensor<f32>| {
        tape.constant(Tensor::new(t.rows(), t.cols(), t.data().iter().map(|&x| E::from_f64(x as f64)).collect()))
    };
    let pos_mask = cast(&eye);
    let pseudo_mask = cast(&pseudo);
    let neg_mask = cast(&Tensor::from_fn(bsz, bsz, |r, c| if r == c { 0.0 } else { 1.0 }));

    let pos_term = d.scale_by(a).neg().shift_by(b).log_sigmoid().neg();
    let neg_term = d.scale_by(a).shift_by(b.neg()).log_sigmoid().neg();
    let scale = E::from_f64(1.0 / (bsz * bsz) as f64);

    let matching = pos_term
        .mul(pos_mask)
        .add(neg_term.mul(neg_mask))
        .sum()
        .mul_scalar(scale);
    let pseudo_loss = pos_term.mul(pseudo_mask).sum().mul_scalar(scale);

    let scalar = matching.add(pseudo_loss.mul_scalar(E::from_f64(alpha as f64)));
    PairTerms {
        scalar,
        matching: matching.value().item().to_f64(),
        pseudo: pseudo_loss.value().item().to_f64(),
    }
}

/// The full objective over the three modality pairs.
///
/// `image` must be the metadata-fused branch. VIB is computed once per
/// modality and reported per pair as the mean of the two sides, so the sum
/// of pair losses equals the optimized total.
pub fn total_loss<'t, E: Elem>(
    tape: &'t Tape<E>,
    bound: &BoundParams<'t, E>,
    image: &GaussianBatch<'t, E>,
    audio: &GaussianBatch<'t, E>,
    text: &GaussianBatch<'t, E>,
    alpha: f32,
    beta: f32,
) -> (Var<'t, E>, LossBreakdown) {
    let bsz = image.batch_size();
    assert!(bsz >= 2, "contrastive batches need at least 2 samples");
    assert!(audio.batch_size() == bsz && text.batch_size() == bsz, "batch size mismatch");

    let a = bound.var("loss.a_tilde").exp();
    let b = bound.var("loss.b");

    let at = pair_matching(tape, audio, text, a, b, alpha);
    let ai = pair_matching(tape, audio, image, a, b, alpha);
    let it = pair_matching(tape, image, text, a, b, alpha);

    let vib_i = vib_term(image);
    let vib_a = vib_term(audio);
    let vib_t = vib_term(text);
    let (vi, va, vt) =
        (vib_i.value().item().to_f64(), vib_a.value().item().to_f64(), vib_t.value().item().to_f64());

    let beta_e = E::from_f64(beta as f64);
    let total = at
        .scalar
        .add(ai.scalar)
        .add(it.scalar)
        .add(vib_i.add(vib_a).add(vib_t).mul_scalar(beta_e));

    let alpha_f = alpha as f64;
    let beta_f = beta as f64;
    let breakdown = LossBreakdown {
        audio_text: PairLoss { matching: at.matching, pseudo: at.pseudo, vib: (va + vt) / 2.0 },
        audio_image: PairLoss { matching: ai.matching, pseudo: ai.pseudo, vib: (va + vi) / 2.0 },
        image_text: PairLoss { matching: it.matching, pseudo: it.pseudo, vib: (vi + vt) / 2.0 },
        total: (at.matching + ai.matching + it.matching)
            + alpha_f * (at.pseudo + ai.pseudo + it.pseudo)
            + beta_f * (va + vi + vt),
    };
    (total, breakdown)
}

/// Symmetric InfoNCE over cosine similarities with a learnable temperature,
/// applied to the `mu` vectors of the same three modality pairs.
pub fn infonce_total_loss<'t, E: Elem>(
    tape: &'t Tape<E>,
    bound: &BoundParams<'t, E>,
    image: &GaussianBatch<'t, E>,
    audio: &GaussianBatch<'t, E>,
    text: &GaussianBatch<'t, E>,
) -> (Var<'t, E>, LossBreakdown) {
    let bsz = image.batch_size();
    assert!(bsz >= 2, "contrastive batches need at least 2 samples");
    let scale = bound.var("loss.logit_scale").exp();

    let pair = |p: Var<'t, E>, q: Var<'t, E>| -> Var<'t, E> {
        let logits = l2_normalize_rows(p).matmul_nt(l2_normalize_rows(q)).scale_by(scale);
        let eye = tape.constant(Tensor::from_fn(bsz, bsz, |r, c| {
            if r == c {
                E::from_f64(1.0)
            } else {
                E::ZERO
            }
        }));
        let row_ce = logits.log_softmax_rows().mul(eye).sum().mul_scalar(E::from_f64(-1.0 / bsz as f64));
        let col_ce = logits
            .transpose()
            .log_softmax_rows()
            .mul(eye)
            .sum()
            .mul_scalar(E::from_f64(-1.0 / bsz as f64));
        row_ce.add(col_ce).mul_scalar(E::from_f64(0.5))
    };

    let at = pair(audio.mu, text.mu);
    let ai = pair(audio.mu, image.mu);
    let it = pair(image.mu, text.mu);
    let total = at.add(ai).add(it);
    let breakdown = LossBreakdown {
        audio_text: PairLoss { matching: at.value().item().to_f64(), ..Default::default() },
        audio_image: PairLoss { matching: ai.value().item().to_f64(), ..Default::default() },
        image_text: PairLoss { matching: it.value().item().to_f64(), ..Default::default() },
        total: total.value().item().to_f64(),
    };
    (total, breakdown)
}

fn l2_normalize_rows<'t, E: Elem>(x: Var<'t, E>) -> Var<'t, E> {
    let norms = x.mul(x).row_sum().add_scalar(E::from_f64(1e-12)).sqrt();
    let inv = tape_ones_like(norms).div(norms);
    x.scale_rows(inv)
}

fn tape_ones_like<'t, E: Elem>(v: Var<'t, E>) -> Var<'t, E> {
    v.mul_scalar(E::ZERO).add_scalar(E::ONE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::Rng;

    fn emb(mu: &[f32], var: &[f32]) -> GaussianEmbedding {
        GaussianEmbedding::new(mu.to_vec(), var.iter().map(|v| v.ln()).collect())
    }

    #[test]
    fn csd_direct_evaluation() {
        // ||(1,0)-(0,1)||^2 = 2; ||(0.5,0.5)+(0.25,0.25)||_1 = 1.5
        let zp = emb(&[1.0, 0.0], &[0.5, 0.5]);
        let zq = emb(&[0.0, 1.0], &[0.25, 0.25]);
        assert!((csd(&zp, &zq) - 3.5).abs() < 1e-6);
    }

    #[test]
    fn csd_identical_embeddings_with_tiny_variance() {
        let zp = emb(&[0.3, -0.7], &[1e-20, 1e-20]);
        let d = csd(&zp, &zp.clone());
        assert!(d < 1e-12, "near-deterministic identical embeddings: {d}");
    }

    #[test]
    fn csd_symmetric_and_non_negative() {
        let mut rng = crate::rng::stream(1, "csd-sym");
        for _ in 0..200 {
            let dim = 8;
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                GaussianEmbedding::new(
                    (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    (0..dim).map(|_| rng.gen_range(-3.0..1.0)).collect(),
                )
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(csd(&a, &b).to_bits(), csd(&b, &a).to_bits());
            assert!(csd(&a, &b) >= 0.0);
        }
    }

    #[test]
    fn match_loss_examples() {
        // d = b/a makes the logit zero for both labels
        assert!((match_loss(0.5, true, 2.0, 1.0) - 0.5f64.ln().abs()).abs() < 1e-9);
        assert!((match_loss(0.5, false, 2.0, 1.0) - 0.5f64.ln().abs()).abs() < 1e-9);
        // w=1, a=1, b=1, d=0 -> -log sigmoid(1)
        assert!((match_loss(0.0, true, 1.0, 1.0) - 0.313_261_687_5).abs() < 1e-9);
        // negative pair far away: loss decays to zero
        assert!(match_loss(1e4, false, 1.0, 0.0) < 1e-9);
        let seq: Vec<f64> = (1..6).map(|k| match_loss(k as f64, false, 1.0, 0.0)).collect();
        assert!(seq.windows(2).all(|w| w[1] < w[0]), "monotone decay: {seq:?}");
    }

    #[test]
    fn pseudo_positive_mask_matches_rule_on_worked_matrix() {
        let d = Tensor::new(3, 3, vec![1.0, 2.0, 3.0, 0.5, 2.0, 1.0, 4.0, 1.0, 2.0]);
        let eye = Tensor::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        let mask = mine_pseudo_positives(&d, &eye);
        // Row 0: 2,3 > 1 -> none. Row 1: 0.5 <= 2 and 1 <= 2 -> (1,0), (1,2).
        // Row 2: 1 <= 2 -> (2,1).
        let want = [(1usize, 0usize), (1, 2), (2, 1)];
        for r in 0..3 {
            for c in 0..3 {
                let expected = if want.contains(&(r, c)) { 1.0 } else { 0.0 };
                assert_eq!(mask.get(r, c), expected, "entry ({r},{c})");
            }
        }
    }

    #[test]
    fn pseudo_positive_ties_are_included() {
        let d = Tensor::new(2, 2, vec![1.0, 1.0, 5.0, 2.0]);
        let eye = Tensor::from_fn(2, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        let mask = mine_pseudo_positives(&d, &eye);
        assert_eq!(mask.get(0, 1), 1.0, "tie at the positive distance is pseudo");
        assert_eq!(mask.get(1, 0), 0.0);
    }

    #[test]
    fn pseudo_mask_empty_when_positive_is_strict_minimum() {
        let d = Tensor::new(2, 2, vec![0.1, 3.0, 4.0, 0.2]);
        let eye = Tensor::from_fn(2, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        let mask = mine_pseudo_positives(&d, &eye);
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    #[should_panic(expected = "exactly one positive")]
    fn row_without_positive_is_contract_error() {
        let d = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::zeros(2, 2);
        let _ = mine_pseudo_positives(&d, &w);
    }

    #[test]
    fn vib_values() {
        let standard = emb(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(vib_loss(&standard).abs() < 1e-12);
        let shifted = emb(&[1.0], &[1.0]);
        assert!((vib_loss(&shifted) - 0.5).abs() < 1e-9);
        let mut rng = crate::rng::stream(2, "vib");
        for _ in 0..100 {
            let z = GaussianEmbedding::new(
                (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            assert!(vib_loss(&z) >= -1e-12);
        }
    }

    fn random_batch<'t>(
        tape: &'t Tape<f64>,
        bsz: usize,
        dim: usize,
        seed: u64,
    ) -> GaussianBatch<'t, f64> {
        let mut rng = crate::rng::stream(seed, "loss-batch");
        let mu = Tensor::from_fn(bsz, dim, |_, _| rng.gen_range(-1.0..1.0));
        let lv = Tensor::from_fn(bsz, dim, |_, _| rng.gen_range(-2.0..0.5));
        GaussianBatch { mu: tape.param(mu), log_var: tape.param(lv) }
    }

    #[test]
    fn csd_matrix_agrees_with_scalar_csd() {
        let tape = Tape::<f64>::new();
        let p = random_batch(&tape, 5, 7, 3);
        let q = random_batch(&tape, 5, 7, 4);
        let d = csd_matrix(&tape, &p, &q).value();
        let pe = p.to_embeddings();
        let qe = q.to_embeddings();
        for r in 0..5 {
            for c in 0..5 {
                let want = csd(&pe[r], &qe[c]);
                let got = d.get(r, c);
                assert!((got - want).abs() / want.max(1.0) < 1e-6, "({r},{c}): {got} vs {want}");
            }
        }
    }

    fn loss_param_store() -> ParamStore {
        let mut store = ParamStore::new();
        init_loss_params(&mut store, &LossParams::default());
        store
    }

    #[test]
    fn total_loss_is_finite_on_identical_clones() {
        let store = loss_param_store();
        let tape = Tape::<f64>::new();
        let bound = store.bind(&tape);
        let mu = Tensor::filled(4, 6, 0.3);
        let lv = Tensor::filled(4, 6, -1.0);
        let z = GaussianBatch { mu: tape.param(mu), log_var: tape.param(lv) };
        let (total, breakdown) = total_loss(&tape, &bound, &z, &z, &z, 0.1, 1e-4);
        assert!(total.value().item().is_finite());
        assert!(breakdown.total.is_finite());
    }

    #[test]
    fn switches_zero_out_terms() {
        let store = loss_param_store();
        let tape = Tape::<f64>::new();
        let bound = store.bind(&tape);
        let i = random_batch(&tape, 4, 6, 10);
        let a = random_batch(&tape, 4, 6, 11);
        let t = random_batch(&tape, 4, 6, 12);
        let (total, bd) = total_loss(&tape, &bound, &i, &a, &t, 0.0, 0.0);
        let pure_match = bd.audio_text.matching + bd.audio_image.matching + bd.image_text.matching;
        assert!((total.value().item() - pure_match).abs() < 1e-9);
    }

    #[test]
    fn breakdown_total_matches_scalar_and_pair_sum() {
        let store = loss_param_store();
        let tape = Tape::<f64>::new();
        let bound = store.bind(&tape);
        let i = random_batch(&tape, 5, 6, 20);
        let a = random_batch(&tape, 5, 6, 21);
        let t = random_batch(&tape, 5, 6, 22);
        let (alpha, beta) = (0.1f32, 1e-2f32);
        let (total, bd) = total_loss(&tape, &bound, &i, &a, &t, alpha, beta);
        assert!((total.value().item() - bd.total).abs() < 1e-9);
        let pair_sum: f64 = [bd.audio_text, bd.audio_image, bd.image_text]
            .iter()
            .map(|p| p.matching + alpha as f64 * p.pseudo + beta as f64 * p.vib)
            .sum();
        assert!((bd.total - pair_sum).abs() < 1e-9, "{} vs {pair_sum}", bd.total);
    }

    #[test]
    fn total_loss_invariant_under_batch_permutation() {
        let store = loss_param_store();
        let tape = Tape::<f64>::new();
        let bound = store.bind(&tape);
        let i = random_batch(&tape, 6, 5, 30);
        let a = random_batch(&tape, 6, 5, 31);
        let t = random_batch(&tape, 6, 5, 32);
        let (total, _) = total_loss(&tape, &bound, &i, &a, &t, 0.1, 1e-3);

        // permute all three batches by the same permutation
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |z: &GaussianBatch<'_, f64>| {
            let mu = z.mu.value();
            let lv = z.log_var.value();
            GaussianBatch {
                mu: tape.param(Tensor::from_fn(6, 5, |r, c| mu.get(perm[r], c))),
                log_var: tape.param(Tensor::from_fn(6, 5, |r, c| lv.get(perm[r], c))),
            }
        };
        let (ip, ap, tp) = (permute(&i), permute(&a), permute(&t));
        let (total_p, _) = total_loss(&tape, &bound, &ip, &ap, &tp, 0.1, 1e-3);
        let (x, y) = (total.value().item(), total_p.value().item());
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }

    #[test]
    fn positive_pairs_shrink_sigma_negatives_grow_it() {
        // d(L_m)/d(sigma^2) > 0 for a positive pair, < 0 for a pure negative.
        let store = loss_param_store();
        let tape = Tape::<f64>::new();
        let bound = store.bind(&tape);
        // two well-separated samples so neither is pseudo-positive
        let mu = Tensor::new(2, 2, vec![0.0, 0.0, 10.0, 10.0]);
        let lv = Tensor::filled(2, 2, -1.0);
        let z = GaussianBatch { mu: tape.param(mu), log_var: tape.param(lv.clone()) };
        let a = bound.var("loss.a_tilde").exp();
        let b = bound.var("loss.b");
        let terms = pair_matching(&tape, &z, &z, a, b, 0.0);
        let grads = tape.backward(terms.scalar);
        let g_lv = grads.get(z.log_var).unwrap();
        // dL/d(log_var) = dL/d(sigma^2) * sigma^2, and sigma^2 > 0, so signs carry.
        // log_var rows feed both the anchor-positive term (own pair) and
        // negative terms vs the other sample. Check the aggregate signs via
        // separated batches instead: positive-only (single pair, w=1).
        assert_eq!(g_lv.shape(), (2, 2));
        // Build explicit two-batch positive / negative cases:
        let tape2 = Tape::<f64>::new();
        let bound2 = store.bind(&tape2);
        let zp = GaussianBatch {
            mu: tape2.param(Tensor::new(1, 2, vec![0.0, 0.0])),
            log_var: tape2.param(Tensor::filled(1, 2, -1.0)),
        };
        let zq = GaussianBatch {
            mu: tape2.param(Tensor::new(1, 2, vec![0.5, -0.2])),
            log_var: tape2.param(Tensor::filled(1, 2, -1.2)),
        };
        let a2 = bound2.var("loss.a_tilde").exp();
        let b2 = bound2.var("loss.b");
        let d = csd_matrix(&tape2, &zp, &zq);
        let pos = d.scale_by(a2).neg().shift_by(b2).log_sigmoid().neg().sum();
        let g = tape2.backward(pos);
        for &gi in g.get(zp.log_var).unwrap().data() {
            assert!(gi > 0.0, "positive pair should push sigma down, grad {gi}");
        }
        let neg = d.scale_by(a2).shift_by(b2.neg()).log_sigmoid().neg().sum();
        let g = tape2.backward(neg);
        for &gi in g.get(zp.log_var).unwrap().data() {
            assert!(gi < 0.0, "negative pair should push sigma up, grad {gi}");
        }
    }

    #[test]
    fn csd_loss_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(40, "csd-gc");
        let mu_q = Tensor::<f64>::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let lv_q = Tensor::<f64>::from_fn(3, 4, |_, _| rng.gen_range(-2.0..0.0));
        let mu_p = Tensor::<f64>::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let err = grad_check(
            |t, v| {
                let p = GaussianBatch { mu: v, log_var: t.constant(lv_q.clone()) };
                let q = GaussianBatch { mu: t.constant(mu_q.clone()), log_var: t.constant(lv_q.clone()) };
                csd_matrix(t, &p, &q).sum_squares()
            },
            &mu_p,
            1e-3,
        );
        assert!(err < 1e-4, "csd mu grad error {err}");

        let lv_p = Tensor::<f64>::from_fn(3, 4, |_, _| rng.gen_range(-2.0..0.0));
        let err = grad_check(
            |t, v| {
                let p = GaussianBatch { mu: t.constant(mu_p.clone()), log_var: v };
                let q = GaussianBatch { mu: t.constant(mu_q.clone()), log_var: t.constant(lv_q.clone()) };
                csd_matrix(t, &p, &q).mean()
            },
            &lv_p,
            1e-3,
        );
        assert!(err < 1e-4, "csd log_var grad error {err}");
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        // Gradcheck through total_loss w.r.t. one modality's mu and the loss
        // scalars, with mining masks frozen by construction (well-separated
        // clusters keep the pseudo set empty and stable under the probe).
        let store = loss_param_store();
        let mut rng = crate::rng::stream(41, "total-gc");
        let base = Tensor::<f64>::from_fn(4, 3, |r, _| r as f64 * 5.0 + rng.gen_range(-0.1..0.1));
        let lv = Tensor::<f64>::from_fn(4, 3, |_, _| rng.gen_range(-2.0..-1.0));
        let store2 = store.clone();
        let (base2, lv2) = (base.clone(), lv.clone());
        let err = grad_check(
            move |t, v| {
                let bound = store2.bind(t);
                let mk = |shift: f64| GaussianBatch {
                    mu: t.constant(base2.map(|x| x + shift)),
                    log_var: t.constant(lv2.clone()),
                };
                let i = GaussianBatch { mu: v, log_var: t.constant(lv2.clone()) };
                let (total, _) = total_loss(t, &bound, &i, &mk(0.02), &mk(-0.02), 0.1, 1e-3);
                total
            },
            &base,
            1e-3,
        );
        assert!(err < 1e-4, "total_loss mu grad error {err}");
    }

    #[test]
    fn infonce_runs_and_decreases_for_aligned_embeddings() {
        let mut store = ParamStore::new();
        init_loss_params(&mut store, &LossParams::default());
        let tape = Tape::<f64>::new();
        let bound = store.bind(&tape);
        let mut rng = crate::rng::stream(50, "infonce");
        let mu = Tensor::from_fn(4, 6, |_, _| rng.gen_range(-1.0..1.0));
        let lv = Tensor::filled(4, 6, -1.0);
        let aligned = GaussianBatch { mu: tape.param(mu.clone()), log_var: tape.param(lv.clone()) };
        let (aligned_loss, bd) = infonce_total_loss(&tape, &bound, &aligned, &aligned, &aligned);
        assert!(bd.total.is_finite());
        // aligned embeddings give lower loss than scrambled ones
        let scrambled = GaussianBatch {
            mu: tape.param(Tensor::from_fn(4, 6, |r, c| mu.get(3 - r, c))),
            log_var: tape.param(lv),
        };
        let (scrambled_loss, _) = infonce_total_loss(&tape, &bound, &aligned, &scrambled, &aligned);
        assert!(aligned_loss.value().item() < scrambled_loss.value().item());
    }
}
