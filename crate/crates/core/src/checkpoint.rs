//! "PLACE-CKPT v1" checkpoints: 8-byte magic, little-endian `u64` header
//! length, JSON header, then little-endian `f32` tensor payloads in header
//! order.

use std::io::{Read, Write};
use std::path::Path;

use place_autograd::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionError, ModelConfig, PlaceModel};
use crate::text_semantics::Vocabulary;

pub const MAGIC: &[u8; 8] = b"PLACEv1\0";
pub const FORMAT: &str = "PLACE-CKPT v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a PLACE checkpoint (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] DiffusionError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub tensors: Vec<TensorEntry>,
    pub vocabulary: Vocabulary,
    pub config: ModelConfig,
    /// Free-form run metadata (training steps, seed, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode<T: Real>(model: &PlaceModel<T>, metadata: serde_json::Value) -> Result<Vec<u8>, CheckpointError> {
    let tensors =
        model.params().iter().map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f32".into() }).collect();
    let header = Header { format: FORMAT.into(), tensors, vocabulary: model.vocabulary().clone(), config: model.config().clone(), metadata };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + model.params().num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params().iter() {
        for &v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(PlaceModel<T>, Header), CheckpointError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| CheckpointError::Malformed("header truncated".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format != FORMAT {
        return Err(CheckpointError::Malformed(format!("unsupported format {:?}", header.format)));
    }
    let mut pos = 16 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(CheckpointError::Malformed(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| CheckpointError::Malformed(format!("payload of {} truncated", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data).map_err(|x| CheckpointError::Malformed(x.to_string()))?));
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let model = PlaceModel::from_tensors(header.config.clone(), header.vocabulary.clone(), tensors)?;
    Ok((model, header))
}

pub fn save<T: Real>(model: &PlaceModel<T>, path: &Path, metadata: serde_json::Value) -> Result<(), CheckpointError> {
    std::fs::File::create(path)?.write_all(&encode(model, metadata)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(PlaceModel<T>, Header), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
