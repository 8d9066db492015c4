//! Dataset records, manifests, geographic splitting, and synthetic data.

mod split;
mod store;
mod synth;

pub use split::{
    assign_splits, audit_assignment, cell_key, Assignment, CellKey, CellRecord, Density,
    SplitAssignment, SplitAudit, SplitConfig,
};
pub use store::{Payload, PayloadStore};
pub use synth::{synth_dataset, synth_samples, SynthConfig, SynthMode};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Platform an audio recording came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioSource {
    Inaturalist,
    Yfcc,
    Aporee,
    Freesound,
}

impl AudioSource {
    pub const ALL: [AudioSource; 4] =
        [AudioSource::Inaturalist, AudioSource::Yfcc, AudioSource::Aporee, AudioSource::Freesound];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }
}

/// Whether a caption came from record metadata or a captioning model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    MetadataCaption,
    ModelCaption,
}

impl TextSource {
    pub const ALL: [TextSource; 2] = [TextSource::MetadataCaption, TextSource::ModelCaption];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }
}

/// One geotagged record: location, time metadata, source tags, and payload
/// references into a [`PayloadStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoSample {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// 1–12.
    pub month: u8,
    /// 0–23.
    pub hour: u8,
    pub audio_source: AudioSource,
    pub text_source: TextSource,
    pub image_ref: String,
    pub audio_ref: String,
    /// Token ids; 0 is the pad id.
    pub caption: Vec<u32>,
}

impl GeoSample {
    /// Check the documented field invariants.
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(CoreError::InputDomain(format!(
                "sample {}: lat {} outside [-90, 90]",
                self.id, self.lat
            )));
        }
        if !(-180.0..180.0).contains(&self.lon) {
            return Err(CoreError::InputDomain(format!(
                "sample {}: lon {} outside [-180, 180)",
                self.id, self.lon
            )));
        }
        if !(1..=12).contains(&self.month) {
            return Err(CoreError::InputDomain(format!(
                "sample {}: month {} outside 1..=12",
                self.id, self.month
            )));
        }
        if self.hour > 23 {
            return Err(CoreError::InputDomain(format!(
                "sample {}: hour {} outside 0..=23",
                self.id, self.hour
            )));
        }
        Ok(())
    }
}

/// Load a JSONL manifest, validating every record and reporting the failing
/// line on error.
pub fn load_manifest(path: &Path) -> Result<Vec<GeoSample>> {
    let file = fs::File::open(path)
        .map_err(|e| CoreError::Config(format!("cannot open manifest {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: GeoSample = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        sample.validate().map_err(|e| CoreError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(sample.id.clone()) {
            return Err(CoreError::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("duplicate id {}", sample.id),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Write samples as one JSON object per line.
pub fn save_manifest(path: &Path, samples: &[GeoSample]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = fs::File::create(path)?;
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
