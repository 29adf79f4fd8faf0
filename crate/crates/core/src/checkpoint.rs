//! Checkpoints: a JSON manifest plus one little-endian blob.
//!
//! Float tensors are stored as f32. Int8 tensors store their raw bytes and an
//! f32 scale array; the manifest records dtype, shape and offsets for both.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compress::QuantizedTensor;
use crate::config::ModelConfig;
use crate::error::{input_err, Result};
use crate::model::DiTModel;
use crate::numerics::Tensor;
use crate::params::{ParamKind, ParamValue};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Blob path next to a manifest: `model.json` → `model.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Write `model` to `manifest` (JSON) and its sibling `.bin` blob.
pub fn save_checkpoint(model: &DiTModel, manifest: &Path) -> Result<Manifest> {
    let blob_file = blob_path(manifest);
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        let offset = blob.len() as u64;
        let entry = match &p.value {
            ParamValue::F32(t) => {
                for v in t.to_f32_vec() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                TensorEntry {
                    name: p.name.clone(),
                    kind: p.kind,
                    shape: t.shape().to_vec(),
                    dtype: DType::F32,
                    offset,
                    nbytes: blob.len() as u64 - offset,
                    scales_offset: None,
                    scales_len: None,
                }
            }
            ParamValue::Int8(q) => {
                blob.extend(q.q.iter().map(|&v| v as u8));
                let nbytes = blob.len() as u64 - offset;
                let so = blob.len() as u64;
                for s in &q.scales {
                    blob.extend_from_slice(&s.to_le_bytes());
                }
                TensorEntry {
                    name: p.name.clone(),
                    kind: p.kind,
                    shape: q.shape().to_vec(),
                    dtype: DType::I8,
                    offset,
                    nbytes,
                    scales_offset: Some(so),
                    scales_len: Some(q.scales.len()),
                }
            }
        };
        tensors.push(entry);
    }
    let m = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        blob: blob_file.file_name().and_then(|n| n.to_str()).unwrap_or("model.bin").to_string(),
        tensors,
    };
    if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob_file, &blob)?;
    fs::write(manifest, serde_json::to_vec_pretty(&m)?)?;
    Ok(m)
}

fn slice<'b>(blob: &'b [u8], offset: u64, len: u64, name: &str) -> Result<&'b [u8]> {
    let (a, b) = (offset as usize, (offset + len) as usize);
    blob.get(a..b).ok_or_else(|| input_err!("tensor {name} runs past the end of the blob"))
}

fn read_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

pub fn read_manifest(manifest: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&fs::read(manifest)?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(input_err!("unsupported checkpoint version {}", m.format_version));
    }
    Ok(m)
}

/// Rebuild a model from a manifest and its blob.
pub fn load_checkpoint(manifest: &Path) -> Result<DiTModel> {
    let m = read_manifest(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let blob = fs::read(dir.join(&m.blob))?;
    let mut model = DiTModel::new(m.config.clone(), 0)?;
    if m.tensors.len() != model.params.len() {
        return Err(input_err!("checkpoint has {} tensors, model expects {}", m.tensors.len(), model.params.len()));
    }
    let mut seen = HashSet::new();
    for e in &m.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(input_err!("duplicate tensor {}", e.name));
        }
        let id = model.params.id(&e.name).ok_or_else(|| input_err!("unknown tensor {}", e.name))?;
        let numel: usize = e.shape.iter().product();
        let value = match e.dtype {
            DType::F32 => {
                let bytes = slice(&blob, e.offset, 4 * numel as u64, &e.name)?;
                ParamValue::F32(Tensor::from_f32(e.shape.clone(), &read_f32(bytes))?)
            }
            DType::I8 => {
                let q = slice(&blob, e.offset, numel as u64, &e.name)?.iter().map(|&b| b as i8).collect();
                let (so, sl) = e
                    .scales_offset
                    .zip(e.scales_len)
                    .ok_or_else(|| input_err!("int8 tensor {} without scales", e.name))?;
                let scales = read_f32(slice(&blob, so, 4 * sl as u64, &e.name)?);
                ParamValue::Int8(QuantizedTensor::from_parts(e.shape.clone(), q, scales)?)
            }
        };
        model.params.set_value(id, value)?;
    }
    Ok(model)
}

/// Manifest plus blob size on disk.
pub fn checkpoint_bytes(manifest: &Path) -> Result<u64> {
    let m = read_manifest(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    Ok(fs::metadata(manifest)?.len() + fs::metadata(dir.join(&m.blob))?.len())
}
