//! Model checkpoints: a JSON manifest at `path` and little-endian `f64`
//! parameter values in `path.bin`, in manifest order.

use std::path::{Path, PathBuf};

use ltlab_core::model::{Model, ModelConfig};
use ltlab_core::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, Result};
use crate::fsio;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub num_classes: usize,
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    /// Hex SHA-256 of the blob.
    pub sha256: String,
}

pub fn blob_path(path: &Path) -> PathBuf {
    fsio::with_suffix(path, ".bin")
}

/// Blob bytes and manifest for a model, without touching the disk.
pub fn encode(model: &Model) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut params = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable,
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        num_classes: model.num_classes,
        model: model.config.clone(),
        params,
        sha256: sha256_hex(&blob),
    };
    (manifest, blob)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Content hash of the model parameters, as stored in the manifest.
pub fn content_hash(model: &Model) -> String {
    encode(model).0.sha256
}

/// Write the checkpoint and return its content hash.
pub fn save(model: &Model, path: &Path) -> Result<String> {
    let (manifest, blob) = encode(model);
    fsio::atomic_write(&blob_path(path), &blob)?;
    fsio::write_json(path, &manifest)?;
    Ok(manifest.sha256)
}

/// Rebuild a model from a checkpoint.
pub fn load(path: &Path) -> Result<Model> {
    let manifest: CheckpointManifest = fsio::read_json(path)?;
    let blob = fsio::read_bytes(&blob_path(path))?;
    decode(&manifest, &blob, path)
}

fn decode(m: &CheckpointManifest, blob: &[u8], path: &Path) -> Result<Model> {
    if m.version != CHECKPOINT_VERSION {
        return Err(format_err(path, format!("unsupported checkpoint version {}", m.version)));
    }
    let total: usize = m.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(format_err(
            path,
            format!("blob holds {} bytes, manifest describes {}", blob.len(), total * 8),
        ));
    }
    if sha256_hex(blob) != m.sha256 {
        return Err(format_err(path, "sha256 mismatch"));
    }
    // weights are overwritten below; the seed only fixes the layout
    let mut model = Model::init(&m.model, m.num_classes, &Rng::new(0)).map_err(|e| format_err(path, e.to_string()))?;
    if model.store.len() != m.params.len() {
        return Err(format_err(
            path,
            format!("{} parameters stored, model has {}", m.params.len(), model.store.len()),
        ));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for entry in &m.params {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| format_err(path, format!("unknown parameter {}", entry.name)))?;
        if model.store.get(id).trainable != entry.trainable {
            return Err(format_err(path, format!("parameter {}: trainable flag differs", entry.name)));
        }
        let n = entry.shape.iter().product();
        let t = ltlab_core::Tensor::new(entry.shape.clone(), values.by_ref().take(n).collect())
            .map_err(|e| format_err(path, e.to_string()))?;
        model
            .store
            .assign(&entry.name, t)
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    Ok(model)
}

/// Copy every frozen backbone weight of `source` into `target`.
pub fn inject_backbone(target: &mut Model, source: &Model) -> Result<()> {
    let (frozen, _) = source.partition();
    for id in frozen {
        let p = source.store.get(id);
        target.store.assign(&p.name, p.tensor.clone())?;
    }
    Ok(())
}
