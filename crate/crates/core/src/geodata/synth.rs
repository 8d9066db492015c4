//! Synthetic desk-scale dataset generator.
//!
//! Each sample carries a planted latent vector `z`; the image tile, audio
//! feature vector, and caption tokens are all deterministic functions of `z`
//! plus modality noise, so cross-modal retrieval is learnable at desk scale.
//!
//! Image tiles spread `z` over low-frequency 2-D cosine patterns, which
//! survive zoom-cropping and resizing. Audio exposes `z` directly (or, in
//! [`SynthMode::SourceCoded`], scrambled by a per-audio-source signed
//! permutation, so matching image to audio requires knowing the source).
//! Captions quantize `z` into token ids.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AudioSource, GeoSample, PayloadStore, TextSource};
use crate::error::{CoreError, Result};
use crate::rng::stream;

/// How audio payloads encode the planted latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// Audio exposes `z` directly; metadata is not needed for matching.
    Planted,
    /// The audio source picks a signed permutation of `z`'s coordinates, so
    /// image-audio matching is ambiguous unless the source is known.
    SourceCoded,
}

/// Generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub planted_dim: usize,
    pub seed: u64,
    pub mode: SynthMode,
    /// Source tile side in pixels (square).
    pub tile_hw: usize,
    pub channels: usize,
    pub audio_dim: usize,
    /// Caption vocabulary size; token 0 stays reserved as pad.
    pub vocab: u32,
    /// Number of distinct 1-degree cells locations cluster into.
    pub n_cells: usize,
    pub noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 64,
            planted_dim: 16,
            seed: 0,
            mode: SynthMode::Planted,
            tile_hw: 224,
            channels: 3,
            audio_dim: 64,
            vocab: 64,
            n_cells: 8,
            noise: 0.05,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CoreError::Config("synth dataset size n must be >= 1".into()));
        }
        if self.planted_dim == 0 || self.planted_dim > self.audio_dim {
            return Err(CoreError::Config(format!(
                "planted_dim {} must lie in 1..=audio_dim ({})",
                self.planted_dim, self.audio_dim
            )));
        }
        if self.vocab < 3 {
            return Err(CoreError::Config("vocab must be at least 3".into()));
        }
        if self.n_cells == 0 {
            return Err(CoreError::Config("n_cells must be >= 1".into()));
        }
        Ok(())
    }
}

/// The planted latent for sample `idx`, standard normal per coordinate.
pub fn planted_latent(cfg: &SynthConfig, idx: usize) -> Vec<f32> {
    let mut rng = stream(cfg.seed, &format!("synth/latent/{idx}"));
    (0..cfg.planted_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Metadata-only sample records (no payloads written). Used by split tooling
/// and tests that never touch pixels.
pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<GeoSample>> {
    cfg.validate()?;
    // Integer cells with centers at (clat+0.5, clon+0.5); jitter keeps each
    // sample inside its cell at the default 1-degree grid.
    let mut cell_rng = stream(cfg.seed, "synth/cells");
    let cells: Vec<(i32, i32)> = (0..cfg.n_cells)
        .map(|_| (cell_rng.gen_range(-60i32..60), cell_rng.gen_range(-170i32..170)))
        .collect();
    // Power-law-ish weights so per-cell counts spread across density strata.
    let weights: Vec<f64> = (0..cfg.n_cells).map(|i| 1.0 / ((i + 1) as f64).powf(0.7)).collect();
    let total_w: f64 = weights.iter().sum();

    let mut samples = Vec::with_capacity(cfg.n);
    let mut rng = stream(cfg.seed, "synth/meta");
    for i in 0..cfg.n {
        let mut pick = rng.gen_range(0.0..total_w);
        let mut cell = 0usize;
        for (ci, w) in weights.iter().enumerate() {
            if pick < *w {
                cell = ci;
                break;
            }
            pick -= w;
        }
        let (clat, clon) = cells[cell];
        let lat = clat as f64 + 0.5 + rng.gen_range(-0.45..0.45);
        let lon = clon as f64 + 0.5 + rng.gen_range(-0.45..0.45);
        let month = rng.gen_range(1u8..=12);
        let hour = rng.gen_range(0u8..=23);
        let audio_source = {
            let r: f64 = rng.gen();
            if r < 0.4 {
                AudioSource::Inaturalist
            } else if r < 0.7 {
                AudioSource::Yfcc
            } else if r < 0.9 {
                AudioSource::Aporee
            } else {
                AudioSource::Freesound
            }
        };
        let text_source =
            if rng.gen::<f64>() < 0.7 { TextSource::MetadataCaption } else { TextSource::ModelCaption };
        let id = format!("s{i:06}");
        let z = planted_latent(cfg, i);
        samples.push(GeoSample {
            id: id.clone(),
            lat,
            lon,
            month,
            hour,
            audio_source,
            text_source,
            image_ref: format!("img/{id}"),
            audio_ref: format!("aud/{id}"),
            caption: caption_tokens(&z, cfg.vocab),
        });
    }
    Ok(samples)
}

/// Full dataset: sample records plus image/audio payloads written to `dir`.
pub fn synth_dataset(cfg: &SynthConfig, dir: &Path) -> Result<(Vec<GeoSample>, PayloadStore)> {
    let samples = synth_samples(cfg)?;
    let mut store = PayloadStore::create(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let z = planted_latent(cfg, i);
        let tile = image_tile(cfg, i, &z);
        store.put(&s.image_ref, &[cfg.channels, cfg.tile_hw, cfg.tile_hw], &tile)?;
        let audio = audio_features(cfg, i, &z, s.audio_source);
        store.put(&s.audio_ref, &[cfg.audio_dim], &audio)?;
    }
    store.flush_index()?;
    Ok((samples, store))
}

/// Quantize the latent into caption token ids in `1..vocab`.
fn caption_tokens(z: &[f32], vocab: u32) -> Vec<u32> {
    z.iter()
        .map(|&v| {
            let clamped = v.clamp(-3.0, 3.0);
            let bucket = ((clamped + 3.0) / 6.0 * (vocab - 2) as f32).floor() as u32;
            1 + bucket.min(vocab - 2)
        })
        .collect()
}

/// Orientation-coded cosine mixture carrying `z`, plus pixel noise.
///
/// Each latent coordinate owns one stripe orientation in (0, 90) degrees,
/// mirrored across the vertical axis so horizontal flips leave the
/// per-orientation energy unchanged. The amplitude along orientation `k` is
/// `z_k`, so the orientation-energy histogram identifies the sample and is
/// stable under crops, rescaling, flips, and zoom level — every augmented
/// training view carries the same signature.
fn image_tile(cfg: &SynthConfig, idx: usize, z: &[f32]) -> Vec<f32> {
    let hw = cfg.tile_hw;
    let dim = cfg.planted_dim;
    let scale = 1.0 / (2.0 * dim as f64).sqrt();
    let mut out = vec![0f32; cfg.channels * hw * hw];
    // ~2 cycles inside a zoom-1 window, ~11 after a zoom-5 downsample —
    // visible at every zoom and crop the training pipeline produces
    let freq = 16.0;

    // cos(ax + by + phi) = cos(ax+phi)cos(by) - sin(ax+phi)sin(by)
    for c in 0..cfg.channels {
        for k in 0..dim {
            let alpha = (k as f64 + 0.5) * std::f64::consts::FRAC_PI_2 / dim as f64;
            let phase = TAU * c as f64 / cfg.channels as f64 + 0.7 * k as f64;
            let amp = z[k] as f64 * scale;
            for sign in [1.0f64, -1.0] {
                let ax = TAU * freq * sign * alpha.cos() / hw as f64;
                let by = TAU * freq * alpha.sin() / hw as f64;
                let cos_x: Vec<f64> = (0..hw).map(|x| (ax * x as f64 + phase).cos()).collect();
                let sin_x: Vec<f64> = (0..hw).map(|x| (ax * x as f64 + phase).sin()).collect();
                for y in 0..hw {
                    let cy = (by * y as f64).cos();
                    let sy = (by * y as f64).sin();
                    let row = &mut out[(c * hw + y) * hw..(c * hw + y + 1) * hw];
                    for (px, (cx, sx)) in row.iter_mut().zip(cos_x.iter().zip(&sin_x)) {
                        *px += (amp * (cx * cy - sx * sy)) as f32;
                    }
                }
            }
        }
    }
    let mut rng = stream(cfg.seed, &format!("synth/imgnoise/{idx}"));
    for px in &mut out {
        *px += cfg.noise * rng.sample::<f32, _>(StandardNormal);
    }
    out
}

/// Audio feature vector; either `z` in the leading slots or a source-coded
/// signed permutation of it.
fn audio_features(cfg: &SynthConfig, idx: usize, z: &[f32], source: AudioSource) -> Vec<f32> {
    let dim = cfg.planted_dim;
    let mut out = vec![0f32; cfg.audio_dim];
    match cfg.mode {
        SynthMode::Planted => out[..dim].copy_from_slice(z),
        SynthMode::SourceCoded => {
            let (perm, signs) = source_code(cfg.seed, source, dim);
            for j in 0..dim {
                out[j] = signs[j] * z[perm[j]];
            }
        }
    }
    let mut rng = stream(cfg.seed, &format!("synth/audnoise/{idx}"));
    for v in &mut out {
        *v += cfg.noise * rng.sample::<f32, _>(StandardNormal);
    }
    out
}

/// Deterministic signed permutation per audio source.
fn source_code(seed: u64, source: AudioSource, dim: usize) -> (Vec<usize>, Vec<f32>) {
    use rand::seq::SliceRandom;
    let mut rng = stream(seed, &format!("synth/code/{}", source.index()));
    let mut perm: Vec<usize> = (0..dim).collect();
    perm.shuffle(&mut rng);
    let signs: Vec<f32> = (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    (perm, signs)
}
