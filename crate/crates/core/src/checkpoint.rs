//! Parameter checkpoints: a JSON manifest of names and shapes next to a flat
//! little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Params};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// `<stem>.json` and `<stem>.bin` for a checkpoint stem.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn encode(params: &Params) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(params.numel() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for id in params.ids() {
        let value = params.value(id);
        tensors.push(TensorEntry {
            name: params.name(id).to_string(),
            rows: value.nrows(),
            cols: value.ncols(),
            offset,
        });
        for v in value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += value.len();
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        blob: String::new(),
        tensors,
    };
    (manifest, blob)
}

/// Writes both files; the manifest records the blob's file name.
pub fn save(params: &Params, stem: &Path) -> Result<()> {
    let (json_path, bin_path) = paths(stem);
    let (mut manifest, blob) = encode(params);
    manifest.blob = bin_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    fs::write(&bin_path, blob)?;
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Overwrites the values of `params` from a checkpoint; every parameter must
/// be present with the same shape.
pub fn load_into(params: &mut Params, stem: &Path) -> Result<()> {
    let (json_path, bin_path) = paths(stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    let blob = fs::read(&bin_path)?;
    restore(params, &manifest, &blob)
}

pub fn restore(params: &mut Params, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    if manifest.version != FORMAT_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {}", manifest.version)));
    }
    if !blob.len().is_multiple_of(8) {
        return Err(Error::data("checkpoint blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::data(format!("checkpoint lacks parameter `{name}`")))?;
        let shape = params.value(id).dim();
        if shape != (entry.rows, entry.cols) {
            return Err(Error::data(format!(
                "parameter `{name}` has shape {shape:?}, checkpoint has ({}, {})",
                entry.rows, entry.cols
            )));
        }
        let end = entry.offset + entry.rows * entry.cols;
        let slice = values
            .get(entry.offset..end)
            .ok_or_else(|| Error::data(format!("parameter `{name}` runs past the blob")))?;
        *params.value_mut(id) = Matrix::from_shape_vec(shape, slice.to_vec()).expect("shape checked");
    }
    Ok(())
}
