// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoints: an 8-byte little-endian header length, a JSON header
//! and a little-endian `f64` blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const FORMAT: &str = "cuetrace-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the blob, in `f64` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Model, vocab_hash: &str, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(model.weights.parameter_count() * 8);
    let mut offset = 0;
    for (name, m) in model.weights.tensors() {
        tensors.push(TensorEntry { name, shape: [m.rows(), m.cols()], offset });
        offset += m.len();
        for v in m.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        config: model.config,
        vocab_hash: vocab_hash.into(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let write = |f: &mut fs::File| -> std::io::Result<()> {
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&blob)
    };
    write(&mut f).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint; returns the model and the recorded vocabulary hash.
pub fn load_checkpoint(path: &Path) -> Result<(Model, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format != FORMAT {
        return Err(bad(&format!("unknown format {:?}", header.format)));
    }
    let blob = &bytes[8 + hlen..];
    if blob.len() % 8 != 0 {
        return Err(bad("blob length not a multiple of 8"));
    }
    let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let mut weights = Weights::zeros(&header.config);
    let names: Vec<String> = weights.tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensors.len() {
        return Err(bad("tensor count does not match config"));
    }
    for ((dst, name), entry) in weights.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
        if &entry.name != name || entry.shape != [dst.rows(), dst.cols()] {
            return Err(bad(&format!("tensor {} does not match expected {name}", entry.name)));
        }
        let chunk = values
            .get(entry.offset..entry.offset + dst.len())
            .ok_or_else(|| bad(&format!("tensor {name} out of bounds")))?;
        *dst = Matrix::from_vec(entry.shape[0], entry.shape[1], chunk.to_vec())?;
    }
    Ok((Model::from_weights(header.config, weights)?, header.vocab_hash))
}

/// Read only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
    Ok(serde_json::from_slice(body)?)
}
