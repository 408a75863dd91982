//! Checkpoint directory: `manifest.json` plus a flat little-endian `f32`
//! blob `params.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{Model, ModelConfig};
use crate::params::Expert;

pub const CHECKPOINT_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub expert: Expert,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: String,
    pub stage: u8,
    pub step: usize,
    pub config_hash: String,
    pub model_config: ModelConfig,
    /// Hash of the world config the training data came from, if any.
    pub world_config_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn float_count(&self) -> usize {
        self.tensors.iter().map(|t| t.rows * t.cols).sum()
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub step: usize,
    pub world_config_hash: Option<String>,
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(model.store.scalar_count() * 4);
    for e in model.store.entries() {
        tensors.push(TensorEntry {
            name: e.name.clone(),
            expert: e.expert,
            rows: e.value.rows(),
            cols: e.value.cols(),
            offset: blob.len(),
        });
        for v in e.value.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION.into(),
        stage: meta.stage,
        step: meta.step,
        config_hash: model.config.hash(),
        model_config: model.config.clone(),
        world_config_hash: meta.world_config_hash.clone(),
        tensors,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!("checkpoint format {}", m.format_version)));
    }
    Ok(m)
}

/// Load a checkpoint. With `expected`, a config-hash mismatch is refused
/// unless `force` is set, in which case it is only logged.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>, force: bool) -> Result<(Model, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() % 4 != 0 || blob.len() / 4 != manifest.float_count() {
        return Err(Error::CheckpointLength {
            expected: manifest.float_count(),
            actual: blob.len() / 4,
        });
    }
    if manifest.model_config.hash() != manifest.config_hash {
        return Err(Error::Incompatible("manifest config does not match its hash".into()));
    }
    if let Some(exp) = expected {
        if exp.hash() != manifest.config_hash {
            if !force {
                return Err(Error::Incompatible(format!(
                    "checkpoint config hash {} differs from expected {}",
                    manifest.config_hash,
                    exp.hash()
                )));
            }
            log::warn!("loading checkpoint with a different config hash (forced)");
        }
    }
    let mut model = Model::new(manifest.model_config.clone(), 0)?;
    if model.store.len() != manifest.tensors.len() {
        return Err(Error::Incompatible(format!(
            "checkpoint has {} tensors, model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    for t in &manifest.tensors {
        let id = model
            .store
            .id(&t.name)
            .ok_or_else(|| Error::Incompatible(format!("unknown tensor {}", t.name)))?;
        let w = model.store.value_mut(id);
        if w.shape() != (t.rows, t.cols) {
            return Err(Error::Shape(format!(
                "tensor {}: checkpoint {}x{}, model {:?}",
                t.name,
                t.rows,
                t.cols,
                w.shape()
            )));
        }
        let end = t.offset + t.rows * t.cols * 4;
        let bytes = blob
            .get(t.offset..end)
            .ok_or_else(|| Error::Incompatible(format!("tensor {} out of blob bounds", t.name)))?;
        for (v, c) in w.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
    }
    Ok((model, manifest))
}
