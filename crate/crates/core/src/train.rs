//! Batch assembly, the optimization loop, and checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_rows, Elem, Tape, Var};
use crate::encoders::{
    augment_train, encode_audio, encode_image, encode_text, eval_crop, init_audio_encoder,
    init_image_encoder, init_prob_head, init_text_encoder, prob_head, zoom_crop,
    AudioEncoderConfig, GaussianEmbedding, GsdConfig, ImageArray, ImageEncoderConfig,
    TextEncoderConfig, TransformerConfig,
};
use crate::error::{CoreError, Result};
use crate::fusion::{embed_metadata, fuse, init_fusion, metadata_dropout, FusionConfig, Metadata};
use crate::geodata::{GeoSample, PayloadStore};
use crate::loss::{
    infonce_total_loss, init_loss_params, total_loss, GaussianBatch, LossBreakdown, LossParams,
};
use crate::optim::{AdamConfig, AdamState, LrSchedule};
use crate::params::{load_checkpoint, save_checkpoint, BoundParams, ParamStore};
use crate::rng::stream;

/// Objective selector: the probabilistic loss or the deterministic baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Pcmepp,
    Infonce,
}

/// Model architecture. Desk-scale defaults keep the overfit suite in minutes;
/// everything is configurable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding dimensionality of the probabilistic space.
    pub d: usize,
    pub image: ImageEncoderConfig,
    pub audio: AudioEncoderConfig,
    pub text: TextEncoderConfig,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub fusion_mlp_hidden: usize,
    /// Source imagery GSD (meters/pixel).
    pub gsd_source: f64,
    /// Reference GSD (meters/pixel).
    pub gsd_reference: f64,
    /// Side of the zoom-crop output fed to augmentation / eval crop.
    pub zoom_out_hw: usize,
    /// Initial bias of every log-variance head.
    pub log_var_bias_init: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 512,
            image: ImageEncoderConfig {
                channels: 3,
                input_hw: 32,
                patch: 16,
                transformer: TransformerConfig { layers: 2, width: 128, heads: 4, mlp_hidden: 256 },
            },
            audio: AudioEncoderConfig { in_dim: 64, width: 256, layers: 3 },
            text: TextEncoderConfig {
                vocab: 64,
                max_len: 128,
                transformer: TransformerConfig { layers: 2, width: 128, heads: 4, mlp_hidden: 256 },
            },
            fusion_layers: 3,
            fusion_heads: 8,
            fusion_mlp_hidden: 512,
            gsd_source: 1.0,
            gsd_reference: 1.0,
            zoom_out_hw: 40,
            log_var_bias_init: -4.0,
        }
    }
}

impl ModelConfig {
    pub fn gsd(&self) -> GsdConfig {
        GsdConfig {
            g: self.gsd_source,
            reference_g: self.gsd_reference,
            d_model: self.image.transformer.width,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            transformer: TransformerConfig {
                layers: self.fusion_layers,
                width: self.d,
                heads: self.fusion_heads,
                mlp_hidden: self.fusion_mlp_hidden,
            },
        }
    }
}

/// Training recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub lr_base: f32,
    pub weight_decay: f32,
    pub zoom_set: Vec<u32>,
    pub loss_kind: LossKind,
    pub alpha: f32,
    pub beta: f32,
    pub metadata_dropout_rate: f64,
    /// Apply random-resized-crop + flip during training (eval always center-crops).
    pub train_augment: bool,
    pub seed: u64,
    pub eval_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            warmup_steps: 200,
            lr_base: 5e-5,
            weight_decay: 0.2,
            zoom_set: vec![1, 3, 5],
            loss_kind: LossKind::Pcmepp,
            alpha: 0.1,
            beta: 1e-4,
            metadata_dropout_rate: 0.5,
            train_augment: true,
            seed: 0,
            eval_every: 200,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CoreError::Config("batch_size must be >= 2 (contrastive negatives)".into()));
        }
        if self.zoom_set.is_empty() {
            return Err(CoreError::Config("zoom_set must be non-empty".into()));
        }
        for &l in &self.zoom_set {
            if l == 0 {
                return Err(CoreError::Config("zoom levels must be >= 1".into()));
            }
        }
        if self.steps > 0 && !(self.warmup_steps > 0 && self.warmup_steps <= self.steps) {
            return Err(CoreError::Config(format!(
                "warmup_steps {} must lie in 1..=steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.metadata_dropout_rate) {
            return Err(CoreError::Config("metadata_dropout_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// All learnable state plus the optimizer and schedule.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub schedule: LrSchedule,
}

impl ModelState {
    /// Deterministic initialization from the training config and seed.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let mut params = ParamStore::new();
        init_image_encoder(&mut params, &m.image, m.d, cfg.seed);
        init_audio_encoder(&mut params, &m.audio, m.d, cfg.seed);
        init_text_encoder(&mut params, &m.text, m.d, cfg.seed);
        init_prob_head(&mut params, "audio.head", m.d, cfg.seed, m.log_var_bias_init);
        init_prob_head(&mut params, "text.head", m.d, cfg.seed, m.log_var_bias_init);
        init_fusion(&mut params, &m.fusion(), m.d, cfg.seed, m.log_var_bias_init);
        init_loss_params(&mut params, &LossParams { alpha: cfg.alpha, beta: cfg.beta, ..Default::default() });
        let adam = AdamState::new(AdamConfig {
            lr_base: cfg.lr_base,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        });
        let schedule = LrSchedule::new(cfg.warmup_steps.max(1), cfg.steps.max(1), cfg.lr_base);
        Ok(Self { config: m.clone(), params, adam, schedule })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.params, &self.adam, &self.schedule, &self.config)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, adam, schedule, config) = load_checkpoint::<ModelConfig>(dir)?;
        Ok(Self { config, params, adam, schedule })
    }
}

/// One assembled minibatch of aligned (image, audio, text) triplets.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub ids: Vec<String>,
    /// Encoder-input images (post zoom-crop, post augmentation).
    pub images: Vec<ImageArray>,
    pub zooms: Vec<u32>,
    pub audio: Vec<Vec<f32>>,
    pub captions: Vec<Vec<u32>>,
    /// Post-dropout metadata.
    pub metadata: Vec<Metadata>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Sample indices for a step: epoch-wise sampling without replacement, with
/// each epoch's permutation drawn statelessly from the seed.
fn batch_indices(n: usize, batch_size: usize, step: u64, seed: u64) -> Vec<usize> {
    let start = step as usize * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = start / n;
    let mut offset = start % n;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, &format!("epoch/{epoch}")));
    while out.len() < batch_size {
        if offset == n {
            epoch += 1;
            offset = 0;
            perm = (0..n).collect();
            perm.shuffle(&mut stream(seed, &format!("epoch/{epoch}")));
        }
        out.push(perm[offset]);
        offset += 1;
    }
    out
}

/// Assemble the batch for `step`: draw zooms, apply zoom-crop plus training
/// augmentation, draw metadata dropout. Deterministic in `(seed, step)`.
pub fn make_batch(
    samples: &[GeoSample],
    store: &PayloadStore,
    cfg: &TrainConfig,
    step: u64,
) -> Result<TripletBatch> {
    if samples.len() < cfg.batch_size {
        return Err(CoreError::Config(format!(
            "need at least batch_size ({}) samples, have {}",
            cfg.batch_size,
            samples.len()
        )));
    }
    let indices = batch_indices(samples.len(), cfg.batch_size, step, cfg.seed);
    let mut rng = stream(cfg.seed, &format!("batch/{step}"));
    let mut batch = TripletBatch {
        ids: Vec::with_capacity(cfg.batch_size),
        images: Vec::with_capacity(cfg.batch_size),
        zooms: Vec::with_capacity(cfg.batch_size),
        audio: Vec::with_capacity(cfg.batch_size),
        captions: Vec::with_capacity(cfg.batch_size),
        metadata: Vec::with_capacity(cfg.batch_size),
    };
    let out_hw = cfg.model.zoom_out_hw;
    for &i in &indices {
        let s = &samples[i];
        let zoom = *cfg.zoom_set.as_slice().choose(&mut rng).unwrap();
        let tile = ImageArray::from_payload(&store.get(&s.image_ref)?)?;
        let zoomed = zoom_crop(&tile, zoom, (out_hw, out_hw))?;
        let image = if cfg.train_augment {
            augment_train(&zoomed, cfg.model.image.input_hw, &mut rng)
        } else {
            // keep the RNG stream aligned so toggling augmentation does not
            // silently reshuffle zoom/dropout draws
            let _ = augment_train(&zoomed, cfg.model.image.input_hw, &mut rng);
            eval_crop(&zoomed, cfg.model.image.input_hw)
        };
        let meta = metadata_dropout(&Metadata::from_sample(s), cfg.metadata_dropout_rate, &mut rng);
        batch.ids.push(s.id.clone());
        batch.images.push(image);
        batch.zooms.push(zoom);
        batch.audio.push(store.get(&s.audio_ref)?.data);
        batch.captions.push(s.caption.clone());
        batch.metadata.push(meta);
    }
    Ok(batch)
}

/// Tape-level Gaussian batches for the three modalities.
pub struct ModalBatches<'t, E: Elem = f32> {
    pub image: GaussianBatch<'t, E>,
    pub audio: GaussianBatch<'t, E>,
    pub text: GaussianBatch<'t, E>,
}

/// Forward all three branches; the image branch always goes through fusion
/// (with whatever metadata mask the batch carries).
///
/// Per-sample work (patch projection, MLPs, heads) is packed row-wise into
/// batch-level matmuls; attention stays per-sample. Numerically this matches
/// the single-sample encoders to rounding.
pub fn embed_triplet_batch<'t, E: Elem>(
    tape: &'t Tape<E>,
    bound: &BoundParams<'t, E>,
    cfg: &ModelConfig,
    batch: &TripletBatch,
) -> Result<ModalBatches<'t, E>> {
    assert!(!batch.is_empty(), "cannot embed an empty batch");
    let bsz = batch.len();
    let gsd = cfg.gsd();

    // ---- image branch: fixed patch count per sample ----
    let icfg = &cfg.image;
    let patch_dim = icfg.channels * icfg.patch * icfg.patch;
    let grid = icfg.input_hw / icfg.patch;
    let p_per = grid * grid;
    let width = icfg.transformer.width;
    let mut patch_rows: Vec<E> = Vec::with_capacity(bsz * p_per * patch_dim);
    let mut pos_rows: Vec<E> = Vec::with_capacity(bsz * p_per * width);
    for i in 0..bsz {
        let img = &batch.images[i];
        assert_eq!(
            (img.channels, img.h, img.w),
            (icfg.channels, icfg.input_hw, icfg.input_hw),
            "batch image must already be at encoder input size"
        );
        let (rows, nx, ny) = crate::encoders::patchify(img, icfg.patch);
        debug_assert_eq!(nx * ny, p_per);
        patch_rows.extend(rows.iter().map(|&v| E::from_f64(v as f64)));
        let pos = crate::encoders::gsd_pos_embed(nx, ny, batch.zooms[i], &gsd);
        pos_rows.extend(pos.data().iter().map(|&v| E::from_f64(v as f64)));
    }
    let patches = tape.constant(crate::autodiff::Tensor::new(bsz * p_per, patch_dim, patch_rows));
    let pos = tape.constant(crate::autodiff::Tensor::new(bsz * p_per, width, pos_rows));
    let tokens = patches
        .matmul(bound.var("image.patch_proj.w"))
        .add_row_broadcast(bound.var("image.patch_proj.b"))
        .add(pos);
    let img_offsets: Vec<usize> = (0..=bsz).map(|i| i * p_per).collect();
    let encoded =
        crate::encoders::run_transformer_packed(tokens, &img_offsets, bound, "image", &icfg.transformer);
    let pooled = block_mean_matrix(tape, &img_offsets).matmul(encoded);
    let h_img = pooled.matmul(bound.var("image.proj.w")).add_row_broadcast(bound.var("image.proj.b"));

    // ---- fusion: variable token count per sample ----
    let fusion_cfg = cfg.fusion();
    let mut parts: Vec<Var<'t, E>> = Vec::new();
    let mut fusion_offsets = vec![0usize];
    for i in 0..bsz {
        parts.push(bound.var("fusion.special"));
        parts.push(h_img.slice_rows(i, i + 1));
        let meta_tokens = embed_metadata(tape, bound, &batch.metadata[i])?;
        let t_i = 2 + meta_tokens.len();
        parts.extend(meta_tokens);
        fusion_offsets.push(fusion_offsets.last().unwrap() + t_i);
    }
    let seq = concat_rows(&parts);
    let fused = crate::encoders::run_transformer_packed(
        seq,
        &fusion_offsets,
        bound,
        "fusion",
        &fusion_cfg.transformer,
    );
    // pull each sample's special-token row
    let total = *fusion_offsets.last().unwrap();
    let extract = tape.constant(crate::autodiff::Tensor::from_fn(bsz, total, |r, c| {
        if c == fusion_offsets[r] {
            E::ONE
        } else {
            E::ZERO
        }
    }));
    let special = extract.matmul(fused);
    let (img_mu, img_lv) = prob_head(bound, "fusion.head", special);

    // ---- audio branch ----
    let acfg = &cfg.audio;
    let mut feat_rows: Vec<E> = Vec::with_capacity(bsz * acfg.in_dim);
    for a in &batch.audio {
        assert_eq!(a.len(), acfg.in_dim, "audio feature length mismatch");
        feat_rows.extend(a.iter().map(|&v| E::from_f64(v as f64)));
    }
    let mut x = tape.constant(crate::autodiff::Tensor::new(bsz, acfg.in_dim, feat_rows));
    for layer in 0..acfg.layers {
        let name = format!("audio.mlp.w{layer}");
        x = x.matmul(bound.var(&name)).add_row_broadcast(bound.var(&format!("{name}.b"))).silu();
    }
    let h_aud = x.matmul(bound.var("audio.proj.w")).add_row_broadcast(bound.var("audio.proj.b"));
    let (aud_mu, aud_lv) = prob_head(bound, "audio.head", h_aud);

    // ---- text branch: variable caption lengths ----
    let tcfg = &cfg.text;
    let mut ids: Vec<usize> = Vec::new();
    let mut positions: Vec<usize> = Vec::new();
    let mut text_offsets = vec![0usize];
    for caption in &batch.captions {
        let toks: Vec<usize> = caption
            .iter()
            .filter(|&&t| t != crate::encoders::PAD_ID)
            .map(|&t| t as usize)
            .collect();
        if toks.is_empty() {
            return Err(CoreError::InputDomain("caption has no non-pad tokens".into()));
        }
        if toks.len() > tcfg.max_len {
            return Err(CoreError::InputDomain(format!(
                "caption length {} exceeds max_len {}",
                toks.len(),
                tcfg.max_len
            )));
        }
        for &t in &toks {
            if t >= tcfg.vocab {
                return Err(CoreError::InputDomain(format!("token id {t} outside vocab {}", tcfg.vocab)));
            }
        }
        positions.extend(0..toks.len());
        text_offsets.push(text_offsets.last().unwrap() + toks.len());
        ids.extend(toks);
    }
    let tok = bound.var("text.embed").gather_rows(&ids);
    let posv = bound.var("text.pos").gather_rows(&positions);
    let encoded = crate::encoders::run_transformer_packed(
        tok.add(posv),
        &text_offsets,
        bound,
        "text",
        &tcfg.transformer,
    );
    let pooled = block_mean_matrix(tape, &text_offsets).matmul(encoded);
    let h_txt = pooled.matmul(bound.var("text.proj.w")).add_row_broadcast(bound.var("text.proj.b"));
    let (txt_mu, txt_lv) = prob_head(bound, "text.head", h_txt);

    Ok(ModalBatches {
        image: GaussianBatch { mu: img_mu, log_var: img_lv },
        audio: GaussianBatch { mu: aud_mu, log_var: aud_lv },
        text: GaussianBatch { mu: txt_mu, log_var: txt_lv },
    })
}

/// Constant `[B, total]` matrix averaging each sample's row block.
fn block_mean_matrix<'t, E: Elem>(tape: &'t Tape<E>, offsets: &[usize]) -> Var<'t, E> {
    let bsz = offsets.len() - 1;
    let total = *offsets.last().unwrap();
    tape.constant(crate::autodiff::Tensor::from_fn(bsz, total, |r, c| {
        if c >= offsets[r] && c < offsets[r + 1] {
            E::from_f64(1.0 / (offsets[r + 1] - offsets[r]) as f64)
        } else {
            E::ZERO
        }
    }))
}

/// One optimization step. Advances the step counter; aborts with the batch's
/// sample ids if the loss goes non-finite.
pub fn train_step(
    state: &mut ModelState,
    batch: &TripletBatch,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, f32)> {
    let tape = Tape::<f32>::new();
    let bound = state.params.bind(&tape);
    let modal = embed_triplet_batch(&tape, &bound, &state.config, batch)?;
    let (loss, breakdown) = match cfg.loss_kind {
        LossKind::Pcmepp => {
            total_loss(&tape, &bound, &modal.image, &modal.audio, &modal.text, cfg.alpha, cfg.beta)
        }
        LossKind::Infonce => infonce_total_loss(&tape, &bound, &modal.image, &modal.audio, &modal.text),
    };
    if !breakdown.total.is_finite() {
        return Err(CoreError::NonFiniteLoss {
            step: state.adam.step as usize,
            batch_ids: batch.ids.clone(),
        });
    }
    let grads = tape.backward(loss);
    let by_name = bound.grads_by_name(&grads);
    let lr = state.schedule.lr_at(state.adam.step.min(state.schedule.total_steps));
    state.adam.step(state.params.tensors_mut(), &by_name, lr);
    Ok((breakdown, lr))
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f32,
    pub match_at: f64,
    pub match_ai: f64,
    pub match_it: f64,
    pub pseudo_at: f64,
    pub pseudo_ai: f64,
    pub pseudo_it: f64,
    pub vib_at: f64,
    pub vib_ai: f64,
    pub vib_it: f64,
    pub total: f64,
}

impl LogRecord {
    fn from_breakdown(step: u64, lr: f32, b: &LossBreakdown) -> Self {
        Self {
            step,
            lr,
            match_at: b.audio_text.matching,
            match_ai: b.audio_image.matching,
            match_it: b.image_text.matching,
            pseudo_at: b.audio_text.pseudo,
            pseudo_ai: b.audio_image.pseudo,
            pseudo_it: b.image_text.pseudo,
            vib_at: b.audio_text.vib,
            vib_ai: b.audio_image.vib,
            vib_it: b.image_text.vib,
            total: b.total,
        }
    }
}

/// Side outputs of [`fit`].
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// When set, checkpoints land in `<run_dir>/checkpoint` and the training
    /// log in `<run_dir>/train_log.jsonl`.
    pub run_dir: Option<PathBuf>,
    /// Validation samples for periodic retrieval evaluation.
    pub val_ids: Vec<String>,
}

/// Run the optimization loop over the train split.
pub fn fit(
    samples: &[GeoSample],
    store: &PayloadStore,
    train_ids: &[String],
    cfg: &TrainConfig,
    options: &FitOptions,
) -> Result<(ModelState, Vec<LogRecord>)> {
    cfg.validate()?;
    let by_id: std::collections::BTreeMap<&str, &GeoSample> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let train: Vec<GeoSample> = train_ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .cloned()
                .ok_or_else(|| CoreError::Config(format!("train id {id} missing from samples")))
        })
        .collect::<Result<_>>()?;
    let val: Vec<GeoSample> = options
        .val_ids
        .iter()
        .filter_map(|id| by_id.get(id.as_str()).copied().cloned())
        .collect();

    let mut state = ModelState::init(cfg)?;
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let mut log_file = match &options.run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("train_log.jsonl"))?)
        }
        None => None,
    };

    for step in 0..cfg.steps {
        let batch = make_batch(&train, store, cfg, step)?;
        let (breakdown, lr) = train_step(&mut state, &batch, cfg)?;
        let record = LogRecord::from_breakdown(step, lr, &breakdown);
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        log.push(record);

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !val.is_empty() {
            let settings = crate::retrieval::EvalSettings {
                direction: crate::retrieval::Direction::I2A,
                zoom: *cfg.zoom_set.first().unwrap(),
                use_text: false,
                use_metadata: true,
            };
            let report = crate::retrieval::evaluate(&state, &val, store, &settings)?;
            if let Some(dir) = &options.run_dir {
                let path = dir.join(format!("val_eval_{:06}.json", step + 1));
                fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
        }
    }

    if let Some(dir) = &options.run_dir {
        state.save(&dir.join("checkpoint"))?;
    }
    Ok((state, log))
}

/// Frozen-parameter Gaussian embedding of one image tile (fused branch).
pub fn eval_image_embedding(
    state: &ModelState,
    tile: &ImageArray,
    zoom: u32,
    meta: &Metadata,
) -> Result<GaussianEmbedding> {
    let cfg = &state.config;
    let zoomed = zoom_crop(tile, zoom, (cfg.zoom_out_hw, cfg.zoom_out_hw))?;
    let image = eval_crop(&zoomed, cfg.image.input_hw);
    let tape = Tape::<f32>::new();
    let bound = state.params.bind_frozen(&tape);
    let h = encode_image(&tape, &bound, &cfg.image, &cfg.gsd(), &image, zoom);
    let tokens = embed_metadata(&tape, &bound, meta)?;
    let (mu, lv) = fuse(&bound, &cfg.fusion(), h, &tokens);
    Ok(GaussianEmbedding::new(mu.value().data().to_vec(), lv.value().data().to_vec()))
}

/// Frozen-parameter Gaussian embedding of an audio feature vector.
pub fn eval_audio_embedding(state: &ModelState, features: &[f32]) -> GaussianEmbedding {
    let tape = Tape::<f32>::new();
    let bound = state.params.bind_frozen(&tape);
    let h = encode_audio(&tape, &bound, &state.config.audio, features);
    let (mu, lv) = prob_head(&bound, "audio.head", h);
    GaussianEmbedding::new(mu.value().data().to_vec(), lv.value().data().to_vec())
}

/// Frozen-parameter Gaussian embedding of a caption.
pub fn eval_text_embedding(state: &ModelState, tokens: &[u32]) -> Result<GaussianEmbedding> {
    let tape = Tape::<f32>::new();
    let bound = state.params.bind_frozen(&tape);
    let h = encode_text(&tape, &bound, &state.config.text, tokens)?;
    let (mu, lv) = prob_head(&bound, "text.head", h);
    Ok(GaussianEmbedding::new(mu.value().data().to_vec(), lv.value().data().to_vec()))
}

/// Zero-step smoke forward used by shape tests: embeds one sample.
pub fn forward_single<'t, E: Elem>(
    tape: &'t Tape<E>,
    bound: &BoundParams<'t, E>,
    cfg: &ModelConfig,
    image: &ImageArray,
    zoom: u32,
    audio: &[f32],
    caption: &[u32],
    meta: &Metadata,
) -> Result<[(Var<'t, E>, Var<'t, E>); 3]> {
    let h_img = encode_image(tape, bound, &cfg.image, &cfg.gsd(), image, zoom);
    let tokens = embed_metadata(tape, bound, meta)?;
    let img = fuse(bound, &cfg.fusion(), h_img, &tokens);
    let aud = prob_head(bound, "audio.head", encode_audio(tape, bound, &cfg.audio, audio));
    let txt = prob_head(bound, "text.head", encode_text(tape, bound, &cfg.text, caption)?);
    Ok([img, aud, txt])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{synth_dataset, SynthConfig};

    /// Small-everything config for fast unit tests (not the desk defaults).
    pub(crate) fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps: 4,
            warmup_steps: 1,
            lr_base: 1e-3,
            eval_every: 0,
            seed,
            model: ModelConfig {
                d: 32,
                image: ImageEncoderConfig {
                    channels: 3,
                    input_hw: 16,
                    patch: 8,
                    transformer: TransformerConfig { layers: 1, width: 16, heads: 2, mlp_hidden: 32 },
                },
                audio: AudioEncoderConfig { in_dim: 64, width: 32, layers: 2 },
                text: TextEncoderConfig {
                    vocab: 64,
                    max_len: 32,
                    transformer: TransformerConfig { layers: 1, width: 16, heads: 2, mlp_hidden: 32 },
                },
                fusion_layers: 2,
                fusion_heads: 4,
                fusion_mlp_hidden: 32,
                zoom_out_hw: 20,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_dataset(seed: u64) -> (tempfile::TempDir, Vec<GeoSample>, PayloadStore) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n: 8, tile_hw: 100, seed, ..Default::default() };
        let (samples, store) = synth_dataset(&cfg, dir.path()).unwrap();
        (dir, samples, store)
    }

    #[test]
    fn batch_zoom_set_and_determinism() {
        let (_dir, samples, store) = tiny_dataset(1);
        let mut cfg = tiny_config(5);
        cfg.zoom_set = vec![1];
        let b = make_batch(&samples, &store, &cfg, 0).unwrap();
        assert!(b.zooms.iter().all(|&z| z == 1));
        let b2 = make_batch(&samples, &store, &cfg, 0).unwrap();
        assert_eq!(b.ids, b2.ids);
        assert_eq!(b.images[0].data, b2.images[0].data);
        assert_eq!(b.metadata, b2.metadata);
    }

    #[test]
    fn zoom_frequencies_are_near_uniform() {
        let (_dir, samples, store) = tiny_dataset(2);
        let mut cfg = tiny_config(6);
        cfg.zoom_set = vec![1, 3, 5];
        cfg.batch_size = 4;
        let mut counts = [0usize; 3];
        let mut total = 0usize;
        for step in 0..750 {
            let b = make_batch(&samples, &store, &cfg, step).unwrap();
            for &z in &b.zooms {
                counts[match z {
                    1 => 0,
                    3 => 1,
                    _ => 2,
                }] += 1;
                total += 1;
            }
        }
        assert_eq!(total, 3000);
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / total as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.03, "zoom {i} frequency {freq}");
        }
    }

    #[test]
    fn insufficient_samples_is_config_error() {
        let (_dir, samples, store) = tiny_dataset(3);
        let mut cfg = tiny_config(7);
        cfg.batch_size = 100;
        assert!(matches!(make_batch(&samples, &store, &cfg, 0), Err(CoreError::Config(_))));
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (_dir, samples, store) = tiny_dataset(4);
        let mut cfg = tiny_config(8);
        cfg.lr_base = 0.0;
        let mut state = ModelState::init(&cfg).unwrap();
        let before = state.params.content_hash();
        let batch = make_batch(&samples, &store, &cfg, 0).unwrap();
        let (breakdown, lr) = train_step(&mut state, &batch, &cfg).unwrap();
        assert_eq!(lr, 0.0);
        assert!(breakdown.total.is_finite());
        assert_eq!(state.params.content_hash(), before);
        assert_eq!(state.adam.step, 1);
    }

    #[test]
    fn single_step_descends_on_fixed_batch() {
        let (_dir, samples, store) = tiny_dataset(5);
        let mut cfg = tiny_config(9);
        cfg.lr_base = 1e-4;
        cfg.warmup_steps = 1;
        cfg.steps = 8;
        let mut state = ModelState::init(&cfg).unwrap();
        let batch = make_batch(&samples, &store, &cfg, 0).unwrap();
        // measure loss, take several steps on the same batch, re-measure
        let loss_on = |state: &ModelState| {
            let tape = Tape::<f32>::new();
            let bound = state.params.bind_frozen(&tape);
            let modal = embed_triplet_batch(&tape, &bound, &state.config, &batch).unwrap();
            total_loss(&tape, &bound, &modal.image, &modal.audio, &modal.text, cfg.alpha, cfg.beta).1.total
        };
        let before = loss_on(&state);
        for _ in 0..8 {
            train_step(&mut state, &batch, &cfg).unwrap();
        }
        let after = loss_on(&state);
        assert!(after < before, "loss should fall on an overfit batch: {before} -> {after}");
    }

    #[test]
    fn equal_seeds_give_equal_checkpoints() {
        let (_dir, samples, store) = tiny_dataset(6);
        let cfg = tiny_config(10);
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let (s1, log1) = fit(&samples, &store, &ids, &cfg, &FitOptions::default()).unwrap();
        let (s2, log2) = fit(&samples, &store, &ids, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(s1.params.content_hash(), s2.params.content_hash());
        assert_eq!(
            serde_json::to_string(&log1).unwrap(),
            serde_json::to_string(&log2).unwrap()
        );
    }

    #[test]
    fn zero_steps_returns_initialized_state() {
        let (_dir, samples, store) = tiny_dataset(7);
        let mut cfg = tiny_config(11);
        cfg.steps = 0;
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let (state, log) = fit(&samples, &store, &ids, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(state.adam.step, 0);
        assert!(log.is_empty());
        let fresh = ModelState::init(&cfg).unwrap();
        assert_eq!(state.params.content_hash(), fresh.params.content_hash());
    }

    #[test]
    fn infonce_switch_runs_with_same_plumbing() {
        let (_dir, samples, store) = tiny_dataset(8);
        let mut cfg = tiny_config(12);
        cfg.loss_kind = LossKind::Infonce;
        cfg.steps = 2;
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let (state, log) = fit(&samples, &store, &ids, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(state.adam.step, 2);
        assert!(log.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let (_dir, samples, store) = tiny_dataset(9);
        let mut cfg = tiny_config(13);
        cfg.steps = 4;
        // Uninterrupted: 4 steps.
        let mut a = ModelState::init(&cfg).unwrap();
        for step in 0..4 {
            let batch = make_batch(&samples, &store, &cfg, step).unwrap();
            train_step(&mut a, &batch, &cfg).unwrap();
        }
        // Interrupted: 3 steps, save, load, 1 more step.
        let mut b = ModelState::init(&cfg).unwrap();
        for step in 0..3 {
            let batch = make_batch(&samples, &store, &cfg, step).unwrap();
            train_step(&mut b, &batch, &cfg).unwrap();
        }
        let ckpt = tempfile::tempdir().unwrap();
        b.save(ckpt.path()).unwrap();
        let mut b = ModelState::load(ckpt.path()).unwrap();
        let batch = make_batch(&samples, &store, &cfg, b.adam.step).unwrap();
        train_step(&mut b, &batch, &cfg).unwrap();
        assert_eq!(a.params.content_hash(), b.params.content_hash());
        assert_eq!(a.adam.step, b.adam.step);
    }

    #[test]
    fn full_dropout_training_makes_eval_metadata_irrelevant() {
        let (_dir, samples, store) = tiny_dataset(10);
        let mut cfg = tiny_config(14);
        cfg.metadata_dropout_rate = 1.0;
        cfg.steps = 3;
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let (state, _) = fit(&samples, &store, &ids, &cfg, &FitOptions::default()).unwrap();
        // With every component always dropped in training, weights still
        // exist for the metadata embedders but eval with all-masked metadata
        // must equal eval with metadata-free masks by construction.
        let tile = ImageArray::from_payload(&store.get(&samples[0].image_ref).unwrap()).unwrap();
        let with_meta = eval_image_embedding(&state, &tile, 1, &Metadata::all_masked()).unwrap();
        let again = eval_image_embedding(&state, &tile, 1, &Metadata::all_masked()).unwrap();
        assert_eq!(with_meta, again);
    }
}
