//! Modality encoders with probabilistic heads.
//!
//! Three toy (encoder, projection) pairs map image tiles, audio feature
//! vectors, and caption token sequences to a shared `d`-dimensional feature
//! space. The image path is scale-aware: a positional embedding whose
//! sinusoid wavelengths are modulated by ground sample distance times zoom
//! level makes patch positions comparable across zoom levels. Affine
//! `mu` / `log-variance` heads turn features into Gaussian embeddings.

mod image_ops;
mod transformer;

pub use image_ops::{augment_train, eval_crop, patchify, zoom_crop, ImageArray};
pub use transformer::{init_transformer, run_transformer, run_transformer_packed, xavier, TransformerConfig};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Elem, Tensor, Var};
use crate::error::{CoreError, Result};
use crate::params::{BoundParams, ParamStore};

/// A point in the probabilistic embedding space: `N(mu, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
}

impl GaussianEmbedding {
    pub fn new(mu: Vec<f32>, log_var: Vec<f32>) -> Self {
        assert_eq!(mu.len(), log_var.len(), "mu and log_var dims differ");
        Self { mu, log_var }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Total standard deviation `sum_j sigma_j` (the uncertainty scalar).
    pub fn sigma_l1(&self) -> f64 {
        self.log_var.iter().map(|&lv| (lv as f64 / 2.0).exp()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.mu.iter().chain(self.log_var.iter()).all(|v| v.is_finite())
    }
}

/// Ground-sample-distance configuration for the positional embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GsdConfig {
    /// GSD of the source imagery (meters per pixel).
    pub g: f64,
    /// Reference GSD (meters per pixel).
    pub reference_g: f64,
    /// Feature width of the positional embedding (must be even).
    pub d_model: usize,
}

impl GsdConfig {
    fn validate(&self) {
        assert!(self.g > 0.0 && self.reference_g > 0.0, "GSD values must be positive");
        assert!(self.d_model % 2 == 0, "positional embedding width must be even");
    }
}

/// Scale-aware sinusoidal positional embedding over a patch grid.
///
/// Even feature `2i` carries `sin(s * px / 10000^(2i/d))` over the patch's
/// x-position, odd feature `2i+1` carries `cos(s * py / 10000^(2i/d))` over
/// its y-position, where `s = g * l / G`. Rows follow patch order
/// `py * num_patches_x + px`, matching [`patchify`].
pub fn gsd_pos_embed(
    num_patches_x: usize,
    num_patches_y: usize,
    l: u32,
    cfg: &GsdConfig,
) -> Tensor<f32> {
    cfg.validate();
    let scale = cfg.g * l as f64 / cfg.reference_g;
    let d = cfg.d_model;
    Tensor::from_fn(num_patches_x * num_patches_y, d, |row, feat| {
        let px = (row % num_patches_x) as f64;
        let py = (row / num_patches_x) as f64;
        let i2 = (feat / 2 * 2) as f64; // 2i for both the sin and cos slot
        let denom = 10000f64.powf(i2 / d as f64);
        if feat % 2 == 0 {
            (scale * px / denom).sin() as f32
        } else {
            (scale * py / denom).cos() as f32
        }
    })
}

/// Image encoder shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub channels: usize,
    /// Encoder input side (square), after augmentation/eval crop.
    pub input_hw: usize,
    pub patch: usize,
    pub transformer: TransformerConfig,
}

/// Audio encoder shape (an MLP over fixed-length feature vectors).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub in_dim: usize,
    pub width: usize,
    pub layers: usize,
}

/// Text encoder shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub transformer: TransformerConfig,
}

/// Pad token id for captions.
pub const PAD_ID: u32 = 0;

/// Register image-branch parameters (patch projection, transformer, output
/// projection to `d`).
pub fn init_image_encoder(store: &mut ParamStore, cfg: &ImageEncoderConfig, d: usize, seed: u64) {
    assert!(cfg.input_hw % cfg.patch == 0, "input size must be divisible by patch size");
    let patch_dim = cfg.channels * cfg.patch * cfg.patch;
    let w = cfg.transformer.width;
    store.insert("image.patch_proj.w", xavier(patch_dim, w, seed, "image.patch_proj.w"));
    store.insert("image.patch_proj.b", Tensor::zeros(1, w));
    init_transformer(store, "image", &cfg.transformer, seed);
    store.insert("image.proj.w", xavier(w, d, seed, "image.proj.w"));
    store.insert("image.proj.b", Tensor::zeros(1, d));
}

pub fn init_audio_encoder(store: &mut ParamStore, cfg: &AudioEncoderConfig, d: usize, seed: u64) {
    let mut prev = cfg.in_dim;
    for layer in 0..cfg.layers {
        let name = format!("audio.mlp.w{layer}");
        store.insert(&name, xavier(prev, cfg.width, seed, &name));
        store.insert(&format!("{name}.b"), Tensor::zeros(1, cfg.width));
        prev = cfg.width;
    }
    store.insert("audio.proj.w", xavier(prev, d, seed, "audio.proj.w"));
    store.insert("audio.proj.b", Tensor::zeros(1, d));
}

pub fn init_text_encoder(store: &mut ParamStore, cfg: &TextEncoderConfig, d: usize, seed: u64) {
    let w = cfg.transformer.width;
    store.insert("text.embed", xavier(cfg.vocab, w, seed, "text.embed"));
    store.insert("text.pos", xavier(cfg.max_len, w, seed, "text.pos"));
    init_transformer(store, "text", &cfg.transformer, seed);
    store.insert("text.proj.w", xavier(w, d, seed, "text.proj.w"));
    store.insert("text.proj.b", Tensor::zeros(1, d));
}

/// Register an affine `mu` / `log_var` head pair under `prefix`.
pub fn init_prob_head(store: &mut ParamStore, prefix: &str, d: usize, seed: u64, log_var_bias: f32) {
    store.insert(&format!("{prefix}.mu.w"), xavier(d, d, seed, &format!("{prefix}.mu.w")));
    store.insert(&format!("{prefix}.mu.b"), Tensor::zeros(1, d));
    store.insert(&format!("{prefix}.lv.w"), xavier(d, d, seed, &format!("{prefix}.lv.w")));
    store.insert(&format!("{prefix}.lv.b"), Tensor::filled(1, d, log_var_bias));
}

/// Encode one pre-cropped image at zoom level `l` into a `[1, d]` feature.
pub fn encode_image<'t, E: Elem>(
    tape: &'t crate::autodiff::Tape<E>,
    bound: &BoundParams<'t, E>,
    cfg: &ImageEncoderConfig,
    gsd: &GsdConfig,
    image: &ImageArray,
    l: u32,
) -> Var<'t, E> {
    assert_eq!(
        (image.channels, image.h, image.w),
        (cfg.channels, cfg.input_hw, cfg.input_hw),
        "encoder input must be pre-cropped to the configured size"
    );
    let (patches, nx, ny) = patchify(image, cfg.patch);
    let patch_dim = cfg.channels * cfg.patch * cfg.patch;
    let patches = Tensor::new(nx * ny, patch_dim, patches.iter().map(|&v| E::from_f64(v as f64)).collect());
    let pos = gsd_pos_embed(nx, ny, l, gsd);
    let pos = Tensor::new(pos.rows(), pos.cols(), pos.data().iter().map(|&v| E::from_f64(v as f64)).collect());

    let tokens = tape
        .constant(patches)
        .matmul(bound.var("image.patch_proj.w"))
        .add_row_broadcast(bound.var("image.patch_proj.b"))
        .add(tape.constant(pos));
    let encoded = run_transformer(tokens, bound, "image", &cfg.transformer);
    let pooled = mean_pool_rows(tape, encoded);
    pooled.matmul(bound.var("image.proj.w")).add_row_broadcast(bound.var("image.proj.b"))
}

/// Encode an audio feature vector into a `[1, d]` feature.
pub fn encode_audio<'t, E: Elem>(
    tape: &'t crate::autodiff::Tape<E>,
    bound: &BoundParams<'t, E>,
    cfg: &AudioEncoderConfig,
    features: &[f32],
) -> Var<'t, E> {
    assert_eq!(features.len(), cfg.in_dim, "audio feature length mismatch");
    let mut x = tape.constant(Tensor::new(1, cfg.in_dim, features.iter().map(|&v| E::from_f64(v as f64)).collect()));
    for layer in 0..cfg.layers {
        let name = format!("audio.mlp.w{layer}");
        x = x.matmul(bound.var(&name)).add_row_broadcast(bound.var(&format!("{name}.b"))).silu();
    }
    x.matmul(bound.var("audio.proj.w")).add_row_broadcast(bound.var("audio.proj.b"))
}

/// Encode a caption (pad id 0 stripped) into a `[1, d]` feature.
pub fn encode_text<'t, E: Elem>(
    tape: &'t crate::autodiff::Tape<E>,
    bound: &BoundParams<'t, E>,
    cfg: &TextEncoderConfig,
    tokens: &[u32],
) -> Result<Var<'t, E>> {
    let ids: Vec<usize> = tokens.iter().filter(|&&t| t != PAD_ID).map(|&t| t as usize).collect();
    if ids.is_empty() {
        return Err(CoreError::InputDomain("caption has no non-pad tokens".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(CoreError::InputDomain(format!(
            "caption length {} exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    for &id in &ids {
        if id >= cfg.vocab {
            return Err(CoreError::InputDomain(format!("token id {id} outside vocab {}", cfg.vocab)));
        }
    }
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = bound.var("text.embed").gather_rows(&ids);
    let pos = bound.var("text.pos").gather_rows(&positions);
    let encoded = run_transformer(tok.add(pos), bound, "text", &cfg.transformer);
    let pooled = mean_pool_rows(tape, encoded);
    Ok(pooled.matmul(bound.var("text.proj.w")).add_row_broadcast(bound.var("text.proj.b")))
}

/// Affine heads producing a Gaussian over the feature.
pub fn prob_head<'t, E: Elem>(
    bound: &BoundParams<'t, E>,
    prefix: &str,
    h: Var<'t, E>,
) -> (Var<'t, E>, Var<'t, E>) {
    let mu = h
        .matmul(bound.var(&format!("{prefix}.mu.w")))
        .add_row_broadcast(bound.var(&format!("{prefix}.mu.b")));
    let log_var = h
        .matmul(bound.var(&format!("{prefix}.lv.w")))
        .add_row_broadcast(bound.var(&format!("{prefix}.lv.b")));
    (mu, log_var)
}

/// Mean over rows via a constant `[1, T]` weight row (keeps gradients exact).
fn mean_pool_rows<'t, E: Elem>(tape: &'t crate::autodiff::Tape<E>, x: Var<'t, E>) -> Var<'t, E> {
    let t = x.shape().0;
    let w = Tensor::filled(1, t, E::from_f64(1.0 / t as f64));
    tape.constant(w).matmul(x)
}
