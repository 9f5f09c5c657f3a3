//! Parameter checkpoints: a TOML manifest naming every block with its shape
//! and byte offset, next to a flat little-endian `f64` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{BlockInfo, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "easpo-params-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    /// What the parameters belong to, e.g. `denoiser` or `scorer`.
    pub kind: String,
    /// Payload file name, relative to the manifest's directory.
    pub payload: String,
    pub total_values: usize,
    pub blocks: Vec<ManifestBlock>,
    #[serde(default)]
    pub meta: toml::Table,
}

fn payload_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (payload).
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    store: &ParamStore,
    meta: toml::Table,
) -> Result<CheckpointManifest> {
    let payload = payload_path(path);
    let blocks = store
        .blocks()
        .iter()
        .map(|b| ManifestBlock {
            name: b.name.clone(),
            shape: b.shape.clone(),
            byte_offset: (b.offset * 8) as u64,
            len: b.len,
        })
        .collect();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        kind: kind.to_string(),
        payload: payload
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        total_values: store.len(),
        blocks,
        meta,
    };
    let mut bytes = Vec::with_capacity(store.len() * 8);
    for v in store.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))?;
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::format(path, format!("cannot serialize manifest: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointManifest, ParamStore)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            path,
            format!("unknown format `{}`", manifest.format),
        ));
    }
    let payload = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.payload);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    if bytes.len() != manifest.total_values * 8 {
        return Err(Error::format(
            &payload,
            format!(
                "payload holds {} bytes, manifest declares {} values",
                bytes.len(),
                manifest.total_values
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    let mut expected_offset = 0usize;
    for b in &manifest.blocks {
        let len: usize = b.shape.iter().product();
        if len != b.len || b.byte_offset as usize != expected_offset * 8 {
            return Err(Error::format(
                path,
                format!("block `{}` is inconsistent", b.name),
            ));
        }
        blocks.push(BlockInfo {
            name: b.name.clone(),
            shape: b.shape.clone(),
            offset: expected_offset,
            len,
        });
        expected_offset += len;
    }
    if expected_offset != manifest.total_values {
        return Err(Error::format(path, "blocks do not cover the payload"));
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::format(
            &payload,
            "payload contains non-finite values",
        ));
    }
    Ok((manifest, ParamStore::from_parts(blocks, values)))
}
