//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `XLCKPT01`, a little-endian `u64` header length,
//! a JSON header (config, dtype, metadata and the parameter manifest), then
//! every parameter as row-major little-endian floats in manifest order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ParamGroup, Seq2SeqModel};
use crate::autograd::Float;

const MAGIC: &[u8; 8] = b"XLCKPT01";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Language names indexed by tag id.
    pub languages: Vec<String>,
    /// Free-form provenance label, e.g. "stage1".
    pub label: String,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    meta: CheckpointMeta,
    params: Vec<ManifestEntry>,
}

pub fn write_checkpoint<T: Float>(model: &Seq2SeqModel<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        dtype: T::DTYPE.to_string(),
        meta: meta.clone(),
        params: model
            .params
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                group: p.group,
                shape: [p.value.nrows(), p.value.ncols()],
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + model.param_count() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &model.params {
        for &v in p.value.iter() {
            v.write_le(&mut out);
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_values<U: Float, T: Float>(data: &[u8], shape: (usize, usize)) -> Array2<T> {
    let values = data
        .chunks_exact(U::BYTES)
        .map(|c| T::of(U::read_le(c).to_f64()))
        .collect();
    Array2::from_shape_vec(shape, values).expect("shape checked")
}

/// Parse a checkpoint, converting stored values to `T` if needed.
pub fn read_checkpoint<T: Float>(bytes: &[u8]) -> Result<(Seq2SeqModel<T>, CheckpointMeta), ModelError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(format!("header: {e}")))?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(bad(format!("unsupported dtype {other:?}"))),
    };
    let mut model = Seq2SeqModel::<T>::zeroed(header.config)?;
    if header.params.len() != model.params.len() {
        return Err(bad(format!(
            "manifest lists {} parameters, config implies {}",
            header.params.len(),
            model.params.len()
        )));
    }
    let mut offset = header_end;
    for (entry, param) in header.params.iter().zip(model.params.iter_mut()) {
        let expected = [param.value.nrows(), param.value.ncols()];
        if entry.name != param.name || entry.group != param.group || entry.shape != expected {
            return Err(bad(format!(
                "parameter {:?} {:?} in group {} does not match config ({:?} {:?})",
                entry.name, entry.shape, entry.group, param.name, expected
            )));
        }
        let n = expected[0] * expected[1] * width;
        let data = bytes
            .get(offset..offset + n)
            .ok_or_else(|| bad(format!("truncated data for {}", entry.name)))?;
        param.value = match width {
            4 => read_values::<f32, T>(data, (expected[0], expected[1])),
            _ => read_values::<f64, T>(data, (expected[0], expected[1])),
        };
        offset += n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint<T: Float>(
    model: &Seq2SeqModel<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    fs::write(path, write_checkpoint(model, meta))?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<(Seq2SeqModel<T>, CheckpointMeta), ModelError> {
    read_checkpoint(&fs::read(path)?)
}
