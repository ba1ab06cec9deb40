//! Checkpoint container: one safetensors file plus a JSON manifest.
//!
//! Tensor names are prefixed by group: `net/` (live parameters), `ema/`
//! (momentum shadows), `opt_gen/` and `opt_dis/` (optimizer moments). The
//! manifest lists every name with its shape and dtype, the counters, the run
//! seed and the resolved config, so a reader can validate before loading.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    /// Resolved training config (TOML).
    pub config: String,
    /// Tensor file, relative to the manifest.
    pub tensors_file: String,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `<stem>.safetensors` and `<stem>.json`; returns the manifest path.
pub fn write(stem: &Path, manifest: &CheckpointManifest, tensors: &BTreeMap<String, Tensor>) -> Result<PathBuf> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let data_path = stem.with_extension("safetensors");
    let mut m = manifest.clone();
    m.format_version = FORMAT_VERSION;
    m.tensors_file = data_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    m.tensors = tensors
        .iter()
        .map(|(k, t)| TensorEntry {
            name: k.clone(),
            shape: t.dims().to_vec(),
            dtype: format!("{:?}", t.dtype()).to_lowercase(),
        })
        .collect();
    let map: HashMap<String, Tensor> = tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    candle_core::safetensors::save(&map, &data_path).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let manifest_path = stem.with_extension("json");
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(&manifest_path, json)?;
    Ok(manifest_path)
}

/// Reads a manifest and its tensors, checking names and shapes against each other.
pub fn read(manifest_path: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    let data_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.tensors_file);
    let loaded = candle_core::safetensors::load(&data_path, &Device::Cpu)
        .map_err(|e| Error::Checkpoint(format!("cannot load {}: {e}", data_path.display())))?;
    if loaded.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, file holds {}",
            manifest.tensors.len(),
            loaded.len()
        )));
    }
    for entry in &manifest.tensors {
        let t = loaded
            .get(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` missing from file", entry.name)))?;
        if t.dims() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, manifest says {:?}",
                entry.name,
                t.dims(),
                entry.shape
            )));
        }
    }
    Ok((manifest, loaded.into_iter().collect()))
}

/// Entries under `prefix`, with the prefix stripped.
pub fn group(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}

pub fn prefixed(tensors: BTreeMap<String, Tensor>, prefix: &str) -> impl Iterator<Item = (String, Tensor)> + '_ {
    tensors.into_iter().map(move |(k, v)| (format!("{prefix}{k}"), v))
}
