//! Checkpoint format: a `model.json` manifest (config, tensor table,
//! `"dtype":"f32le"`) next to `model.bin`, the little-endian f32 payload of
//! every tensor in manifest order. Offsets in the table are byte offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "model.bin";
const FORMAT: &str = "lazyattn-checkpoint";
const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Serialized manifest text and payload bytes.
pub fn checkpoint_bytes(weights: &ModelWeights) -> (String, Vec<u8>) {
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(weights.config.param_count() * 4);
    for ((name, shape), data) in weights.config.tensor_layout().into_iter().zip(weights.tensors()) {
        tensors.push(TensorEntry { name, shape, offset: blob.len() });
        for x in data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest =
        Manifest { format: FORMAT.into(), version: 1, dtype: DTYPE.into(), config: weights.config.clone(), tensors };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    (text, blob)
}

pub fn save_checkpoint(weights: &ModelWeights, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = checkpoint_bytes(weights);
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelWeights> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    parse_checkpoint(&manifest, &blob)
}

/// Validation order: manifest syntax, tensor table against the declared
/// config, payload length, then the config's own invariants.
pub fn parse_checkpoint(manifest: &str, blob: &[u8]) -> Result<ModelWeights> {
    let m: Manifest = serde_json::from_str(manifest).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::MalformedManifest(format!("unknown format {:?}", m.format)));
    }
    if m.dtype != DTYPE {
        return Err(Error::MalformedManifest(format!("unsupported dtype {:?}", m.dtype)));
    }

    let layout = m.config.tensor_layout();
    if layout.len() != m.tensors.len() {
        return Err(Error::DimensionMismatch(format!(
            "config implies {} tensors, manifest lists {}",
            layout.len(),
            m.tensors.len()
        )));
    }
    let mut expected_offset = 0usize;
    for ((name, shape), entry) in layout.iter().zip(&m.tensors) {
        if *name != entry.name {
            return Err(Error::MalformedManifest(format!("expected tensor {name}, found {}", entry.name)));
        }
        if *shape != entry.shape {
            return Err(Error::DimensionMismatch(format!(
                "tensor {name} has shape {:?} but config implies {shape:?}",
                entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::MalformedManifest(format!(
                "tensor {name} at offset {}, expected {expected_offset}",
                entry.offset
            )));
        }
        expected_offset += shape.iter().product::<usize>() * 4;
    }
    if blob.len() < expected_offset {
        return Err(Error::TruncatedWeights { expected: expected_offset, actual: blob.len() });
    }
    if blob.len() > expected_offset {
        return Err(Error::DimensionMismatch(format!(
            "payload has {} bytes, tensor table accounts for {expected_offset}",
            blob.len()
        )));
    }
    m.config.validate()?;

    let tensors = layout
        .iter()
        .zip(&m.tensors)
        .map(|((_, shape), entry)| {
            let n: usize = shape.iter().product();
            blob[entry.offset..entry.offset + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect();
    let weights = ModelWeights::from_tensors(m.config, tensors)?;
    if !weights.is_finite() {
        return Err(Error::InvalidInput("checkpoint contains non-finite weights".into()));
    }
    Ok(weights)
}
