//! Checkpoint container: one file holding a JSON manifest and the raw
//! little-endian f64 parameter blobs. Round-trips are bit exact.
//!
//! Layout: 8-byte magic, u64 LE manifest length, manifest JSON, data blob.
//! The manifest carries the format version, a config snapshot, the
//! iteration counter and one entry per named parameter with its shape and
//! offset (in f64 elements) into the blob.

use crate::error::{Error, Result};
use crate::pipeline::model::{ModelConfig, SpaceTimeModel};
use ndarray::{ArrayD, IxDyn};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"STVSRCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub iteration: usize,
    pub model: ModelConfig,
    /// Snapshot of the training configuration, stored verbatim.
    pub train_config: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
}

/// Serializes model parameters and metadata to `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &SpaceTimeModel,
    train_config: serde_json::Value,
    iteration: usize,
) -> Result<()> {
    let named = model.named_params();
    let mut entries = Vec::with_capacity(named.len());
    let mut blob: Vec<f64> = Vec::new();
    for (name, p) in &named {
        let data = p.to_array();
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: data.shape().to_vec(),
            offset: blob.len(),
            len: data.len(),
        });
        blob.extend(data.iter().copied());
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        iteration,
        model: model.config.clone(),
        train_config,
        entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(MAGIC)
        .and_then(|_| file.write_all(&(manifest_json.len() as u64).to_le_bytes()))
        .and_then(|_| file.write_all(&manifest_json))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::with_capacity(blob.len() * 8);
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a checkpoint and reconstructs the model it describes.
pub fn load_checkpoint(path: &Path) -> Result<(SpaceTimeModel, Manifest)> {
    let mut file =
        fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_json)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("truncated parameter blob".into()));
    }
    let blob: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let model = SpaceTimeModel::new(manifest.model.clone());
    let named = model.named_params();
    if named.len() != manifest.entries.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            named.len(),
            manifest.entries.len()
        )));
    }
    for ((name, param), entry) in named.iter().zip(manifest.entries.iter()) {
        if name != &entry.name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: expected {name}, found {}",
                entry.name
            )));
        }
        if param.shape() != entry.shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: model {:?}, checkpoint {:?}",
                param.shape(),
                entry.shape
            )));
        }
        let end = entry.offset + entry.len;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "blob overrun for {name}: {end} > {}",
                blob.len()
            )));
        }
        let data = ArrayD::from_shape_vec(
            IxDyn(&entry.shape),
            blob[entry.offset..end].to_vec(),
        )
        .map_err(|e| Error::Checkpoint(format!("bad shape for {name}: {e}")))?;
        param.set_data(data);
    }
    Ok((model, manifest))
}
