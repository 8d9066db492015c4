//! Soundscape and uncertainty rasters over geographic tile grids.
//!
//! Tile embeddings are precomputed once per (model, zoom, metadata) and
//! cached on disk keyed by a content hash, so stale parameters can never
//! poison a map. Similarity is negative CSD — the simplest monotone
//! transform of the distance. Temporal frame sequences are min-max
//! normalized with one global range so cross-frame ordering is preserved.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{GaussianEmbedding, ImageArray};
use crate::error::{CoreError, Result};
use crate::fusion::Metadata;
use crate::geodata::PayloadStore;
use crate::loss::csd;
use crate::train::{eval_image_embedding, ModelState};

/// Geographic bounding box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    fn validate(&self) -> Result<()> {
        if !(self.lat_min < self.lat_max && self.lon_min < self.lon_max) {
            return Err(CoreError::Config(format!("degenerate bbox {self:?}")));
        }
        Ok(())
    }
}

/// A row-major grid of image tiles covering a bounding box.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileGrid {
    pub bbox: BBox,
    pub rows: usize,
    pub cols: usize,
    /// Payload store keys, row-major, length `rows * cols`.
    pub tile_refs: Vec<String>,
}

impl TileGrid {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if self.rows == 0 || self.cols == 0 {
            return Err(CoreError::Config("grid must have positive rows and cols".into()));
        }
        if self.tile_refs.len() != self.rows * self.cols {
            return Err(CoreError::Config(format!(
                "grid has {} tile refs for {}x{} cells",
                self.tile_refs.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }

    /// Center coordinates of cell `(r, c)`; row 0 is the north edge.
    pub fn center(&self, r: usize, c: usize) -> (f64, f64) {
        let dlat = (self.bbox.lat_max - self.bbox.lat_min) / self.rows as f64;
        let dlon = (self.bbox.lon_max - self.bbox.lon_min) / self.cols as f64;
        (
            self.bbox.lat_max - (r as f64 + 0.5) * dlat,
            self.bbox.lon_min + (c as f64 + 0.5) * dlon,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read grid {}: {e}", path.display())))?;
        let grid: TileGrid = serde_json::from_str(&text)?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// What a raster's values mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterKind {
    Similarity,
    Uncertainty,
}

/// A georeferenced grid of scalar scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRaster {
    pub rows: usize,
    pub cols: usize,
    pub bbox: BBox,
    pub kind: RasterKind,
    /// Row-major scores; raw until [`normalize_frames`] maps them to [0, 1].
    pub values: Vec<f64>,
    /// Global (min, max) used by normalization, recorded once applied.
    pub value_range: Option<(f64, f64)>,
}

impl ScoreRaster {
    pub fn is_normalized(&self) -> bool {
        self.value_range.is_some()
    }
}

/// Embed every tile of the grid with the supplied metadata, reading through
/// an on-disk cache when `cache_dir` is given.
pub fn precompute_grid_embeddings(
    state: &ModelState,
    grid: &TileGrid,
    store: &PayloadStore,
    zoom: u32,
    meta: &Metadata,
    cache_dir: Option<&Path>,
) -> Result<Vec<GaussianEmbedding>> {
    grid.validate()?;
    let key = cache_key(state, grid, zoom, meta)?;
    if let Some(dir) = cache_dir {
        if let Some(hit) = cache_read(dir, &key, state.config.d, grid.tile_refs.len())? {
            return Ok(hit);
        }
    }
    let embeddings: Vec<GaussianEmbedding> = grid
        .tile_refs
        .par_iter()
        .enumerate()
        .map(|(idx, tile_ref)| {
            let payload = store.get(tile_ref).map_err(|_| {
                CoreError::Config(format!("grid tile {idx} ({tile_ref}) missing from payload store"))
            })?;
            let tile = ImageArray::from_payload(&payload)?;
            eval_image_embedding(state, &tile, zoom, meta)
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = cache_dir {
        cache_write(dir, &key, &embeddings)?;
    }
    Ok(embeddings)
}

/// Cache key: model parameter hash, zoom, metadata, and grid identity.
fn cache_key(state: &ModelState, grid: &TileGrid, zoom: u32, meta: &Metadata) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(state.params.content_hash().as_bytes());
    hasher.update(zoom.to_le_bytes());
    hasher.update(serde_json::to_vec(meta)?);
    hasher.update(serde_json::to_vec(grid)?);
    let digest = hasher.finalize();
    let mut s = String::with_capacity(32);
    use std::fmt::Write;
    for b in digest.iter().take(16) {
        let _ = write!(s, "{b:02x}");
    }
    Ok(s)
}

fn cache_read(dir: &Path, key: &str, d: usize, n: usize) -> Result<Option<Vec<GaussianEmbedding>>> {
    let path = dir.join(format!("{key}.bin"));
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path)?;
    let want = n * d * 2 * 4;
    if bytes.len() != want {
        return Err(CoreError::Config(format!(
            "embedding cache {key} holds {} bytes, expected {want}",
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base = i * d * 2;
        out.push(GaussianEmbedding::new(
            floats[base..base + d].to_vec(),
            floats[base + d..base + 2 * d].to_vec(),
        ));
    }
    Ok(Some(out))
}

fn cache_write(dir: &Path, key: &str, embeddings: &[GaussianEmbedding]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    for e in embeddings {
        for v in e.mu.iter().chain(e.log_var.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write-temp-then-rename so concurrent readers never see a torn file
    let tmp = dir.join(format!(".{key}.tmp"));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, dir.join(format!("{key}.bin")))?;
    Ok(())
}

/// Similarity raster: per-tile score is negative CSD to the query.
pub fn score_map(
    query: &GaussianEmbedding,
    grid: &TileGrid,
    embeddings: &[GaussianEmbedding],
) -> ScoreRaster {
    assert_eq!(embeddings.len(), grid.rows * grid.cols, "embedding count mismatch");
    let values: Vec<f64> = embeddings.iter().map(|e| -csd(query, e)).collect();
    ScoreRaster {
        rows: grid.rows,
        cols: grid.cols,
        bbox: grid.bbox,
        kind: RasterKind::Similarity,
        values,
        value_range: None,
    }
}

/// Uncertainty raster: per-tile `||sigma||_1 = sum_j sqrt(exp(log_var_j))`.
pub fn uncertainty_map(grid: &TileGrid, embeddings: &[GaussianEmbedding]) -> ScoreRaster {
    assert_eq!(embeddings.len(), grid.rows * grid.cols, "embedding count mismatch");
    let values: Vec<f64> = embeddings.iter().map(|e| e.sigma_l1()).collect();
    ScoreRaster {
        rows: grid.rows,
        cols: grid.cols,
        bbox: grid.bbox,
        kind: RasterKind::Uncertainty,
        values,
        value_range: None,
    }
}

/// Min-max normalize a frame sequence to [0, 1] with one global range. A
/// degenerate range (max == min) maps everything to 0.5.
pub fn normalize_frames(rasters: &[ScoreRaster]) -> Vec<ScoreRaster> {
    assert!(!rasters.is_empty(), "normalize_frames needs at least one frame");
    let (r0, c0, k0) = (rasters[0].rows, rasters[0].cols, rasters[0].kind);
    for r in rasters {
        assert!(
            r.rows == r0 && r.cols == c0 && r.kind == k0,
            "frames must share shape and kind"
        );
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for r in rasters {
        for &v in &r.values {
            min = min.min(v);
            max = max.max(v);
        }
    }
    let span = max - min;
    rasters
        .iter()
        .map(|r| {
            let values = r
                .values
                .iter()
                .map(|&v| if span > 0.0 { (v - min) / span } else { 0.5 })
                .collect();
            ScoreRaster { values, value_range: Some((min, max)), ..r.clone() }
        })
        .collect()
}

/// Color ramp for rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    Grayscale,
    Viridis,
}

// Anchor points of the viridis ramp, linearly interpolated to 256 entries.
const VIRIDIS_ANCHORS: [[u8; 3]; 16] = [
    [68, 1, 84],
    [72, 26, 108],
    [71, 47, 125],
    [65, 68, 135],
    [57, 86, 140],
    [49, 104, 142],
    [42, 120, 142],
    [35, 136, 142],
    [31, 152, 139],
    [34, 168, 132],
    [53, 183, 121],
    [84, 197, 104],
    [122, 209, 81],
    [165, 219, 54],
    [210, 226, 27],
    [253, 231, 37],
];

fn palette(colormap: Colormap) -> Vec<u8> {
    let mut plte = Vec::with_capacity(256 * 3);
    match colormap {
        Colormap::Grayscale => {
            for i in 0..256 {
                plte.extend_from_slice(&[i as u8, i as u8, i as u8]);
            }
        }
        Colormap::Viridis => {
            for i in 0..256usize {
                let t = i as f64 / 255.0 * 15.0;
                let lo = t.floor() as usize;
                let hi = (lo + 1).min(15);
                let frac = t - lo as f64;
                for ch in 0..3 {
                    let a = VIRIDIS_ANCHORS[lo][ch] as f64;
                    let b = VIRIDIS_ANCHORS[hi][ch] as f64;
                    plte.push((a + (b - a) * frac).round() as u8);
                }
            }
        }
    }
    plte
}

/// Sidecar metadata written next to every rendered raster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RasterSidecar {
    pub bbox: BBox,
    pub value_range: (f64, f64),
    pub kind: RasterKind,
    pub colormap: Colormap,
}

/// Render a normalized raster as an 8-bit palette PNG plus a JSON sidecar.
/// The PNG index channel is the quantized value: `index = round(v * 255)`.
pub fn render_raster(raster: &ScoreRaster, colormap: Colormap, path: &Path) -> Result<()> {
    let Some(range) = raster.value_range else {
        return Err(CoreError::Config("render_raster requires a normalized raster".into()));
    };
    let indices: Vec<u8> = raster
        .values
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::Config(format!("normalized raster has value {v} outside [0,1]")));
            }
            Ok((v * 255.0).round() as u8)
        })
        .collect::<Result<_>>()?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(file, raster.cols as u32, raster.rows as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(palette(colormap));
    let mut writer = encoder
        .write_header()
        .map_err(|e| CoreError::Config(format!("png encode failed: {e}")))?;
    writer
        .write_image_data(&indices)
        .map_err(|e| CoreError::Config(format!("png encode failed: {e}")))?;
    writer.finish().map_err(|e| CoreError::Config(format!("png encode failed: {e}")))?;

    let sidecar = RasterSidecar { bbox: raster.bbox, value_range: range, kind: raster.kind, colormap };
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Decode the index channel of a rendered raster (round-trip checks).
pub fn read_raster_indices(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| CoreError::Config(format!("png decode failed: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CoreError::Config(format!("png decode failed: {e}")))?;
    buf.truncate(info.buffer_size());
    Ok((buf, info.height as usize, info.width as usize))
}
