//! MCKP checkpoint files: 8-byte magic, u32 little-endian header length,
//! JSON header, then little-endian f32 tensor payloads.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ParamStore, Result, SwinUnetr};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCKP0001";

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// AdamW moment buffers keyed by parameter name, with the step count `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    optimizer_t: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &SwinUnetr<f32>, step: u64, optimizer: Option<OptimizerSnapshot>) -> Self {
        Self {
            config: model.config().clone(),
            step,
            params: model.params().clone(),
            optimizer,
        }
    }

    /// Rebuilds the model, checking that every architecture tensor is present.
    pub fn model(&self) -> Result<SwinUnetr<f32>> {
        SwinUnetr::from_params(self.config.clone(), self.params.clone())
    }
}

fn ckpt_err(path: &str, detail: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.to_string(),
        detail: detail.into(),
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor<f32>)> = ckpt.params.iter().map(|(k, v)| (k.clone(), v)).collect();
    if let Some(opt) = &ckpt.optimizer {
        tensors.extend(opt.m.iter().map(|(k, v)| (format!("{M_PREFIX}{k}"), v)));
        tensors.extend(opt.v.iter().map(|(k, v)| (format!("{V_PREFIX}{k}"), v)));
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        config: ckpt.config.clone(),
        step: ckpt.step,
        optimizer_t: ckpt.optimizer.as_ref().map(|o| o.t),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ckpt_err("<memory>", e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| ckpt_err("<memory>", "header too large"))?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn decode_at(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ckpt_err(path, "missing MCKP0001 magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(ckpt_err(path, format!("header of {len} bytes is truncated")));
    }
    let header: Header =
        serde_json::from_slice(&body[..len]).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    let payload = &body[len..];
    let mut params = BTreeMap::new();
    let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
    let mut expected_end = 0usize;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if e.offset != expected_end || end > payload.len() {
            return Err(ckpt_err(path, format!("tensor {} has an invalid payload range", e.name)));
        }
        expected_end = end;
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| ckpt_err(path, format!("tensor {}: {err}", e.name)))?;
        let slot = if let Some(k) = e.name.strip_prefix(M_PREFIX) {
            m.insert(k.to_string(), t)
        } else if let Some(k) = e.name.strip_prefix(V_PREFIX) {
            v.insert(k.to_string(), t)
        } else {
            params.insert(e.name.clone(), t)
        };
        if slot.is_some() {
            return Err(ckpt_err(path, format!("tensor {} appears twice", e.name)));
        }
    }
    if expected_end != payload.len() {
        return Err(ckpt_err(path, "trailing bytes after the last tensor"));
    }
    let optimizer = match header.optimizer_t {
        Some(t) => Some(OptimizerSnapshot { t, m, v }),
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(ckpt_err(path, "optimizer tensors without a step count")),
    };
    let ckpt = Checkpoint {
        config: header.config,
        step: header.step,
        params,
        optimizer,
    };
    ckpt.model().map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(ckpt)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    decode_at(bytes, "<memory>")
}

/// Writes through a temporary file and a rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let shown = path.display().to_string();
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| ckpt_err(&shown, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| ckpt_err(&shown, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let shown = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| ckpt_err(&shown, e.to_string()))?;
    decode_at(&bytes, &shown)
}
