//! Checkpoint container: `"NGCK"`, a little-endian `u32` header length, a
//! JSON header, then the parameters and the running statistics as
//! little-endian `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::unet::{ConvUNetSpec, Layout};
use super::Network;
use crate::schedule::ScheduleKind;

const MAGIC: &[u8; 4] = b"NGCK";
const VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("payload has {actual} bytes, header implies {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Denoiser,
    Segmenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMeta {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub learn_sigma: bool,
}

/// Record of how a checkpoint was produced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub iterations: usize,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: ModelKind,
    spec: ConvUNetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diffusion: Option<DiffusionMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingMeta>,
    n_params: usize,
    n_buffers: usize,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub network: Network,
    pub diffusion: Option<DiffusionMeta>,
    pub training: Option<TrainingMeta>,
    pub meta: BTreeMap<String, String>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let net = &ck.network;
    let header = Header {
        version: VERSION,
        kind: ck.kind,
        spec: net.spec().clone(),
        diffusion: ck.diffusion.clone(),
        training: ck.training.clone(),
        n_params: net.params.len(),
        n_buffers: net.buffers.len(),
        meta: ck.meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(8 + json.len() + 4 * (net.params.len() + net.buffers.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in net.params.iter().chain(&net.buffers) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if len > MAX_HEADER || bytes.len() < 8 + len {
        return Err(CheckpointError::Header(format!("header length {len} out of range")));
    }
    let header: Header =
        serde_json::from_slice(&bytes[8..8 + len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.version != VERSION {
        return Err(CheckpointError::Header(format!("unsupported version {}", header.version)));
    }
    let layout = Layout::new(&header.spec).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if layout.n_params != header.n_params || layout.n_buffers != header.n_buffers {
        return Err(CheckpointError::Header(format!(
            "spec needs {}+{} values, header declares {}+{}",
            layout.n_params, layout.n_buffers, header.n_params, header.n_buffers
        )));
    }
    if let Some(d) = &header.diffusion {
        if d.steps < 2 {
            return Err(CheckpointError::Header("diffusion needs at least two steps".into()));
        }
    }
    let payload = &bytes[8 + len..];
    let expected = (layout.n_params + layout.n_buffers)
        .checked_mul(4)
        .ok_or_else(|| CheckpointError::Header("parameter count overflows".into()))?;
    if payload.len() != expected {
        return Err(CheckpointError::PayloadLength {
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(CheckpointError::NonFinite(i));
    }
    let buffers = values[layout.n_params..].to_vec();
    let mut params = values;
    params.truncate(layout.n_params);
    let network = Network::from_parts(&header.spec, params, buffers)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok(Checkpoint {
        kind: header.kind,
        network,
        diffusion: header.diffusion,
        training: header.training,
        meta: header.meta,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}
