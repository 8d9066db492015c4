//! Named parameter store, tape binding, and on-disk checkpoints.
//!
//! Checkpoint layout: a directory holding `header.json` — tensor name →
//! `{shape, dtype, file}` plus optimizer state and schedule step — and one
//! raw little-endian `f32` file per tensor. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Elem, Grads, Tape, Tensor, Var};
use crate::error::{CoreError, Result};
use crate::optim::{AdamState, LrSchedule};

/// Ordered collection of named `f32` parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) {
        let prev = self.tensors.insert(name.to_string(), tensor);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor<f32> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.tensors
    }

    /// Bind every parameter onto a tape as a gradient leaf, promoting to `E`.
    pub fn bind<'t, E: Elem>(&self, tape: &'t Tape<E>) -> BoundParams<'t, E> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.param(E::promote(t)));
        }
        BoundParams { vars }
    }

    /// Bind parameters as constants (inference paths; no gradient edges).
    pub fn bind_frozen<'t, E: Elem>(&self, tape: &'t Tape<E>) -> BoundParams<'t, E> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.constant(E::promote(t)));
        }
        BoundParams { vars }
    }

    /// SHA-256 over names, shapes, and raw bytes; keys embedding caches.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update(name.as_bytes());
            hasher.update((t.rows() as u64).to_le_bytes());
            hasher.update((t.cols() as u64).to_le_bytes());
            hasher.update(t.to_le_bytes());
        }
        hex_string(&hasher.finalize())
    }
}

/// Parameters leafed onto a tape for one forward/backward pass.
pub struct BoundParams<'t, E: Elem = f32> {
    vars: BTreeMap<String, Var<'t, E>>,
}

impl<'t, E: Elem> BoundParams<'t, E> {
    pub fn var(&self, name: &str) -> Var<'t, E> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Collect gradients back into name-keyed `f32` tensors.
    pub fn grads_by_name(&self, grads: &Grads<E>) -> BTreeMap<String, Tensor<f32>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), E::demote(g));
            }
        }
        out
    }
}

fn hex_string(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader<C> {
    step: u64,
    schedule: LrSchedule,
    adam_config: crate::optim::AdamConfig,
    model_config: C,
    tensors: BTreeMap<String, TensorMeta>,
}

fn file_name_for(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

/// Write parameters, optimizer state, and schedule step to `dir`.
pub fn save_checkpoint<C: Serialize>(
    dir: &Path,
    params: &ParamStore,
    adam: &AdamState,
    schedule: &LrSchedule,
    model_config: &C,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    let mut write = |prefix: &str, name: &str, t: &Tensor<f32>| -> Result<()> {
        let qualified = format!("{prefix}{name}");
        let file = file_name_for(&qualified);
        fs::write(dir.join(&file), t.to_le_bytes())?;
        tensors.insert(
            qualified,
            TensorMeta { shape: vec![t.rows(), t.cols()], dtype: "f32".to_string(), file },
        );
        Ok(())
    };
    for (name, t) in params.tensors() {
        write("param/", name, t)?;
    }
    for (name, t) in &adam.first_moment {
        write("adam_m/", name, t)?;
    }
    for (name, t) in &adam.second_moment {
        write("adam_v/", name, t)?;
    }
    let header = CheckpointHeader {
        step: adam.step,
        schedule: schedule.clone(),
        adam_config: adam.config.clone(),
        model_config,
        tensors,
    };
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(dir.join("header.json"), json)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<C: DeserializeOwned>(
    dir: &Path,
) -> Result<(ParamStore, AdamState, LrSchedule, C)> {
    let header_path = dir.join("header.json");
    let text = fs::read_to_string(&header_path)
        .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", header_path.display())))?;
    let header: CheckpointHeader<C> = serde_json::from_str(&text)?;
    let mut params = ParamStore::new();
    let mut adam = AdamState::new(header.adam_config);
    adam.step = header.step;
    for (qualified, meta) in &header.tensors {
        if meta.dtype != "f32" {
            return Err(CoreError::Config(format!(
                "unsupported checkpoint dtype {} for {qualified}",
                meta.dtype
            )));
        }
        if meta.shape.len() != 2 {
            return Err(CoreError::Config(format!(
                "checkpoint tensor {qualified} has rank {} (want 2)",
                meta.shape.len()
            )));
        }
        let bytes = fs::read(dir.join(&meta.file))?;
        let t = Tensor::from_le_bytes(meta.shape[0], meta.shape[1], &bytes);
        if let Some(name) = qualified.strip_prefix("param/") {
            params.insert(name, t);
        } else if let Some(name) = qualified.strip_prefix("adam_m/") {
            adam.first_moment.insert(name.to_string(), t);
        } else if let Some(name) = qualified.strip_prefix("adam_v/") {
            adam.second_moment.insert(name.to_string(), t);
        } else {
            return Err(CoreError::Config(format!("unknown tensor namespace in {qualified}")));
        }
    }
    Ok((params, adam, header.schedule, header.model_config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamStore::new();
        params.insert("enc.w", Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f32 * 0.125 - 0.7));
        params.insert("enc.b", Tensor::row(&[1.0e-8, -2.5, 3.25]));
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step = 17;
        adam.first_moment.insert("enc.w".into(), Tensor::filled(3, 4, 0.001));
        adam.second_moment.insert("enc.w".into(), Tensor::filled(3, 4, 0.002));
        let sched = LrSchedule::new(5, 100, 5e-5);

        save_checkpoint(dir.path(), &params, &adam, &sched, &serde_json::json!({"d": 512})).unwrap();
        let (p2, a2, s2, cfg): (ParamStore, AdamState, LrSchedule, serde_json::Value) =
            load_checkpoint(dir.path()).unwrap();

        assert_eq!(params.get("enc.w").data(), p2.get("enc.w").data());
        assert_eq!(params.get("enc.b").data(), p2.get("enc.b").data());
        assert_eq!(a2.step, 17);
        assert_eq!(a2.first_moment["enc.w"].data(), adam.first_moment["enc.w"].data());
        assert_eq!(a2.second_moment["enc.w"].data(), adam.second_moment["enc.w"].data());
        assert_eq!(s2.total_steps, 100);
        assert_eq!(cfg["d"], 512);
        assert_eq!(params.content_hash(), p2.content_hash());
    }

    #[test]
    fn bound_params_route_gradients_by_name() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::row(&[2.0]));
        params.insert("b", Tensor::row(&[3.0]));
        let tape = Tape::<f32>::new();
        let bound = params.bind(&tape);
        let loss = bound.var("a").mul(bound.var("b")).sum();
        let grads = tape.backward(loss);
        let by_name = bound.grads_by_name(&grads);
        assert_eq!(by_name["a"].data(), &[3.0]);
        assert_eq!(by_name["b"].data(), &[2.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_name_panics() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(1.0));
        params.insert("x", Tensor::scalar(2.0));
    }
}
