//! Flat-array payload store.
//!
//! A directory of raw little-endian `f32` files plus `index.json` mapping
//! payload key → `{shape, dtype, file}`. Image payloads are `[C, H, W]`,
//! audio feature payloads are `[n]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PayloadMeta {
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

/// A payload read back from the store.
#[derive(Debug, Clone)]
pub struct Payload {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Payload {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Directory-backed float32 payload store.
#[derive(Debug)]
pub struct PayloadStore {
    dir: PathBuf,
    index: BTreeMap<String, PayloadMeta>,
}

impl PayloadStore {
    /// Create an empty store (directory is created if missing).
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), index: BTreeMap::new() })
    }

    /// Open an existing store.
    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path).map_err(|e| {
            CoreError::Config(format!("cannot read payload index {}: {e}", index_path.display()))
        })?;
        let index: BTreeMap<String, PayloadMeta> = serde_json::from_str(&text)?;
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    pub fn put(&mut self, key: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "payload {key}: {} values for shape {shape:?}", data.len());
        let file = format!("{}.bin", key.replace('/', "_"));
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(self.dir.join(&file), bytes)?;
        self.index.insert(
            key.to_string(),
            PayloadMeta { shape: shape.to_vec(), dtype: "f32".to_string(), file },
        );
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<Payload> {
        let meta = self
            .index
            .get(key)
            .ok_or_else(|| CoreError::Config(format!("payload {key} not found in store")))?;
        if meta.dtype != "f32" {
            return Err(CoreError::Config(format!("payload {key}: unsupported dtype {}", meta.dtype)));
        }
        let bytes = fs::read(self.dir.join(&meta.file))?;
        let numel: usize = meta.shape.iter().product();
        if bytes.len() != numel * 4 {
            return Err(CoreError::Config(format!(
                "payload {key}: file holds {} bytes, shape {:?} wants {}",
                bytes.len(),
                meta.shape,
                numel * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Payload { shape: meta.shape.clone(), data })
    }

    /// Persist the index. Call once after the last `put`.
    pub fn flush_index(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.index)?;
        fs::write(self.dir.join("index.json"), json)?;
        Ok(())
    }
}
