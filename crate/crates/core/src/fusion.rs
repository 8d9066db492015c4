//! Transformer-based metadata fusion of the image branch.
//!
//! Five metadata components — geolocation, month, hour, audio source, text
//! source — are projected to the embedding width, concatenated with the
//! image feature and a learnable special token, and run through a small
//! transformer. The special-token output feeds the `mu` / `log_var` heads,
//! yielding the metadata-conditioned probabilistic image embedding.
//!
//! Meta tokens carry no positional encoding; component identity comes from
//! each component's dedicated embedder, so fusion is invariant to token
//! order. Any subset of components may be masked out.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_rows, Elem, Tape, Tensor, Var};
use crate::encoders::{init_prob_head, init_transformer, prob_head, xavier, TransformerConfig};
use crate::error::{CoreError, Result};
use crate::geodata::{AudioSource, GeoSample, TextSource};
use crate::params::{BoundParams, ParamStore};

/// Number of metadata components.
pub const N_COMPONENTS: usize = 5;

/// Metadata attached to one sample, with per-component presence flags in the
/// order: geolocation, month, hour, audio source, text source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub lat: f64,
    pub lon: f64,
    pub month: u8,
    pub hour: u8,
    pub audio_source: AudioSource,
    pub text_source: TextSource,
    pub present: [bool; N_COMPONENTS],
}

impl Metadata {
    /// All components present, copied from a sample record.
    pub fn from_sample(s: &GeoSample) -> Self {
        Self {
            lat: s.lat,
            lon: s.lon,
            month: s.month,
            hour: s.hour,
            audio_source: s.audio_source,
            text_source: s.text_source,
            present: [true; N_COMPONENTS],
        }
    }

    /// Every component masked out (metadata-free evaluation).
    pub fn all_masked() -> Self {
        Self {
            lat: 0.0,
            lon: 0.0,
            month: 1,
            hour: 0,
            audio_source: AudioSource::Inaturalist,
            text_source: TextSource::MetadataCaption,
            present: [false; N_COMPONENTS],
        }
    }

    pub fn with_mask(mut self, present: [bool; N_COMPONENTS]) -> Self {
        self.present = present;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.present[0] {
            if !(-90.0..=90.0).contains(&self.lat) {
                return Err(CoreError::InputDomain(format!("metadata lat {} outside [-90, 90]", self.lat)));
            }
            if !(-180.0..180.0).contains(&self.lon) {
                return Err(CoreError::InputDomain(format!("metadata lon {} outside [-180, 180)", self.lon)));
            }
        }
        if self.present[1] && !(1..=12).contains(&self.month) {
            return Err(CoreError::InputDomain(format!("metadata month {} outside 1..=12", self.month)));
        }
        if self.present[2] && self.hour > 23 {
            return Err(CoreError::InputDomain(format!("metadata hour {} outside 0..=23", self.hour)));
        }
        Ok(())
    }
}

/// Fusion module shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub transformer: TransformerConfig,
}

/// Cyclical featurization `(sin, cos)` of `value` with the given period.
/// Periodic by construction: `cyclical(0, 24) == cyclical(24, 24)`.
pub fn cyclical(value: f64, period: f64) -> (f64, f64) {
    let angle = std::f64::consts::TAU * value / period;
    (angle.sin(), angle.cos())
}

/// Wrapped geolocation features: `(sin lat, cos lat, sin lon, cos lon)` in
/// radians, continuous across the antimeridian.
pub fn latlon_features(lat: f64, lon: f64) -> [f64; 4] {
    let (la, lo) = (lat.to_radians(), lon.to_radians());
    [la.sin(), la.cos(), lo.sin(), lo.cos()]
}

/// Register fusion parameters: per-component embedders, the special token,
/// the transformer stack, and the image-branch probabilistic head.
pub fn init_fusion(store: &mut ParamStore, cfg: &FusionConfig, d: usize, seed: u64, log_var_bias: f32) {
    assert_eq!(cfg.transformer.width, d, "fusion token width must equal the embedding dim");
    store.insert("fusion.meta.latlon.w", xavier(4, d, seed, "fusion.meta.latlon.w"));
    store.insert("fusion.meta.latlon.b", Tensor::zeros(1, d));
    store.insert("fusion.meta.month.w", xavier(2, d, seed, "fusion.meta.month.w"));
    store.insert("fusion.meta.month.b", Tensor::zeros(1, d));
    store.insert("fusion.meta.hour.w", xavier(2, d, seed, "fusion.meta.hour.w"));
    store.insert("fusion.meta.hour.b", Tensor::zeros(1, d));
    store.insert("fusion.meta.audio_source.embed", xavier(4, d, seed, "fusion.meta.audio_source.embed"));
    store.insert("fusion.meta.text_source.embed", xavier(2, d, seed, "fusion.meta.text_source.embed"));
    store.insert("fusion.special", xavier(1, d, seed, "fusion.special"));
    init_transformer(store, "fusion", &cfg.transformer, seed);
    init_prob_head(store, "fusion.head", d, seed, log_var_bias);
}

/// Project the unmasked metadata components into `[1, d]` tokens.
pub fn embed_metadata<'t, E: Elem>(
    tape: &'t Tape<E>,
    bound: &BoundParams<'t, E>,
    meta: &Metadata,
) -> Result<Vec<Var<'t, E>>> {
    meta.validate()?;
    let mut tokens = Vec::new();
    if meta.present[0] {
        let f = latlon_features(meta.lat, meta.lon);
        let x = tape.constant(Tensor::new(1, 4, f.iter().map(|&v| E::from_f64(v)).collect()));
        tokens.push(
            x.matmul(bound.var("fusion.meta.latlon.w")).add_row_broadcast(bound.var("fusion.meta.latlon.b")),
        );
    }
    if meta.present[1] {
        let (s, c) = cyclical(meta.month as f64, 12.0);
        let x = tape.constant(Tensor::new(1, 2, vec![E::from_f64(s), E::from_f64(c)]));
        tokens.push(
            x.matmul(bound.var("fusion.meta.month.w")).add_row_broadcast(bound.var("fusion.meta.month.b")),
        );
    }
    if meta.present[2] {
        let (s, c) = cyclical(meta.hour as f64, 24.0);
        let x = tape.constant(Tensor::new(1, 2, vec![E::from_f64(s), E::from_f64(c)]));
        tokens.push(
            x.matmul(bound.var("fusion.meta.hour.w")).add_row_broadcast(bound.var("fusion.meta.hour.b")),
        );
    }
    if meta.present[3] {
        tokens.push(bound.var("fusion.meta.audio_source.embed").gather_rows(&[meta.audio_source.index()]));
    }
    if meta.present[4] {
        tokens.push(bound.var("fusion.meta.text_source.embed").gather_rows(&[meta.text_source.index()]));
    }
    Ok(tokens)
}

/// Fuse the image feature with metadata tokens; returns `(mu, log_var)` of
/// the metadata-conditioned image embedding, read off the special token.
pub fn fuse<'t, E: Elem>(
    bound: &BoundParams<'t, E>,
    cfg: &FusionConfig,
    h_image: Var<'t, E>,
    meta_tokens: &[Var<'t, E>],
) -> (Var<'t, E>, Var<'t, E>) {
    let d = cfg.transformer.width;
    assert_eq!(h_image.shape(), (1, d), "image feature must be [1, {d}]");
    let mut seq = Vec::with_capacity(2 + meta_tokens.len());
    seq.push(bound.var("fusion.special"));
    seq.push(h_image);
    seq.extend_from_slice(meta_tokens);
    let encoded = run_fusion_transformer(concat_rows(&seq), bound, cfg);
    let special = encoded.slice_rows(0, 1);
    prob_head(bound, "fusion.head", special)
}

fn run_fusion_transformer<'t, E: Elem>(
    x: Var<'t, E>,
    bound: &BoundParams<'t, E>,
    cfg: &FusionConfig,
) -> Var<'t, E> {
    crate::encoders::run_transformer(x, bound, "fusion", &cfg.transformer)
}

/// Independently mask each component with probability `rate` (training-time
/// regularization; evaluation supplies masks explicitly instead).
pub fn metadata_dropout(meta: &Metadata, rate: f64, rng: &mut ChaCha8Rng) -> Metadata {
    assert!((0.0..=1.0).contains(&rate), "dropout rate {rate} outside [0, 1]");
    let mut out = *meta;
    for i in 0..N_COMPONENTS {
        if rng.gen::<f64>() < rate {
            out.present[i] = false;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn toy_cfg() -> FusionConfig {
        FusionConfig { transformer: TransformerConfig { layers: 3, width: 64, heads: 4, mlp_hidden: 64 } }
    }

    fn toy_store(cfg: &FusionConfig) -> ParamStore {
        let mut store = ParamStore::new();
        init_fusion(&mut store, cfg, 64, 11, -2.0);
        store
    }

    fn full_meta() -> Metadata {
        Metadata {
            lat: 38.6,
            lon: -90.2,
            month: 5,
            hour: 18,
            audio_source: AudioSource::Aporee,
            text_source: TextSource::ModelCaption,
            present: [true; 5],
        }
    }

    #[test]
    fn all_masked_yields_no_tokens() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape);
        let tokens = embed_metadata(&tape, &bound, &Metadata::all_masked()).unwrap();
        assert!(tokens.is_empty());
    }

    #[test]
    fn out_of_range_month_rejected() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape);
        let mut meta = full_meta();
        meta.month = 13;
        assert!(matches!(embed_metadata(&tape, &bound, &meta), Err(CoreError::InputDomain(_))));
    }

    #[test]
    fn hour_cyclical_features_wrap() {
        let a = cyclical(0.0, 24.0);
        let b = cyclical(24.0, 24.0);
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn meta_token_order_does_not_change_fusion() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape);
        let h = tape.constant(Tensor::from_fn(1, 64, |_, c| (c as f32 * 0.37).sin()));
        let tokens = embed_metadata(&tape, &bound, &full_meta()).unwrap();
        assert_eq!(tokens.len(), 5);
        let (mu_fwd, lv_fwd) = fuse(&bound, &cfg, h, &tokens);
        let reversed: Vec<_> = tokens.iter().rev().copied().collect();
        let (mu_rev, lv_rev) = fuse(&bound, &cfg, h, &reversed);
        for (a, b) in mu_fwd.value().data().iter().zip(mu_rev.value().data()) {
            assert!((a - b).abs() < 1e-4, "mu permutation diff {a} vs {b}");
        }
        for (a, b) in lv_fwd.value().data().iter().zip(lv_rev.value().data()) {
            assert!((a - b).abs() < 1e-4, "lv permutation diff {a} vs {b}");
        }
    }

    #[test]
    fn masked_fusion_depends_only_on_image_feature() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let tape = Tape::<f32>::new();
        let bound = store.bind(&tape);
        let h = tape.constant(Tensor::from_fn(1, 64, |_, c| (c as f32 * 0.11).cos()));
        let (mu1, _) = fuse(&bound, &cfg, h, &[]);
        let (mu2, _) = fuse(&bound, &cfg, h, &[]);
        assert_eq!(mu1.value().data(), mu2.value().data());
    }

    #[test]
    fn all_mask_patterns_are_accepted() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        for pattern in 0..32u32 {
            let present = [
                pattern & 1 != 0,
                pattern & 2 != 0,
                pattern & 4 != 0,
                pattern & 8 != 0,
                pattern & 16 != 0,
            ];
            let tape = Tape::<f32>::new();
            let bound = store.bind(&tape);
            let meta = full_meta().with_mask(present);
            let tokens = embed_metadata(&tape, &bound, &meta).unwrap();
            assert_eq!(tokens.len(), present.iter().filter(|&&p| p).count());
            let h = tape.constant(Tensor::filled(1, 64, 0.2));
            let (mu, lv) = fuse(&bound, &cfg, h, &tokens);
            assert_eq!(mu.shape(), (1, 64));
            assert_eq!(lv.shape(), (1, 64));
            assert!(mu.value().all_finite() && lv.value().all_finite());
        }
    }

    #[test]
    fn dropout_rates_zero_and_one() {
        let meta = full_meta();
        let mut rng = stream(3, "drop");
        let kept = metadata_dropout(&meta, 0.0, &mut rng);
        assert_eq!(kept.present, [true; 5]);
        let gone = metadata_dropout(&meta, 1.0, &mut rng);
        assert_eq!(gone.present, [false; 5]);
    }

    #[test]
    fn dropout_keep_frequency_near_half() {
        let meta = full_meta();
        let mut rng = stream(4, "drop-mc");
        let trials = 10_000;
        let mut kept = [0usize; 5];
        for _ in 0..trials {
            let m = metadata_dropout(&meta, 0.5, &mut rng);
            for (k, &p) in kept.iter_mut().zip(&m.present) {
                if p {
                    *k += 1;
                }
            }
        }
        for (i, &k) in kept.iter().enumerate() {
            let freq = k as f64 / trials as f64;
            assert!((freq - 0.5).abs() < 0.02, "component {i} keep frequency {freq}");
        }
    }
}
