//! Checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "GMAECKPT"
//! 8       4     format version, u32 little-endian
//! 12      8     manifest length M, u64 little-endian
//! 20      M     manifest, UTF-8 JSON
//! 20+M    ...   payload: f64 little-endian values, tensors back to back
//! ```
//!
//! The manifest echoes both configs and the step counters, lists every tensor
//! with its group (`param`, `adam_m`, `adam_v`), name, shape, dtype and byte
//! range within the payload, and records the payload length and SHA-256.

use super::{AdamW, TrainConfig};
use crate::vit::{GmaeModel, ModelConfig, ParameterStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GMAECKPT";
const HEADER_LEN: usize = 20;
const DTYPE: &str = "f64le";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor '{tensor}' has shape {found:?} in the checkpoint but {expected:?} under the model config")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl CheckpointError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::Io { .. } => 1,
            CheckpointError::Corrupt(_) => 2,
            CheckpointError::VersionMismatch { .. } => 3,
            CheckpointError::ShapeMismatch { .. } => 4,
        }
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub global_step: u64,
    pub params: ParameterStore,
    pub optimizer: AdamW,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    group: String,
    name: String,
    shape: Vec<usize>,
    dtype: String,
    trainable: bool,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    global_step: u64,
    optimizer_step: u64,
    adamw_eps: f64,
    payload_bytes: u64,
    payload_sha256: String,
    tensors: Vec<TensorRecord>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let stores = [&self.params, &self.optimizer.m, &self.optimizer.v];
        for (group, store) in GROUPS.iter().zip(stores) {
            for e in store.entries() {
                let offset = payload.len() as u64;
                for v in &e.tensor.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                tensors.push(TensorRecord {
                    group: group.to_string(),
                    name: e.name.clone(),
                    shape: e.tensor.shape.clone(),
                    dtype: DTYPE.into(),
                    trainable: e.trainable,
                    offset,
                    nbytes: payload.len() as u64 - offset,
                });
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            global_step: self.global_step,
            optimizer_step: self.optimizer.t,
            adamw_eps: self.optimizer.config.eps,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex(&Sha256::digest(&payload)),
            tensors,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses and fully verifies a container before building anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("missing GMAECKPT header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let manifest_end = usize::try_from(manifest_len)
            .ok()
            .and_then(|m| HEADER_LEN.checked_add(m))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("manifest extends past end of file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(corrupt("manifest version disagrees with header"));
        }
        let payload = &bytes[manifest_end..];
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(CheckpointError::Corrupt(format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }

        let mut stores = [ParameterStore::new(), ParameterStore::new(), ParameterStore::new()];
        for t in &manifest.tensors {
            let g = GROUPS
                .iter()
                .position(|&g| g == t.group)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unknown tensor group '{}'", t.group)))?;
            if t.dtype != DTYPE {
                return Err(CheckpointError::Corrupt(format!("tensor '{}' has dtype {}", t.name, t.dtype)));
            }
            let count: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let end = start.checked_add(count * 8).filter(|&e| e <= payload.len());
            let end = match end {
                Some(e) if t.nbytes as usize == count * 8 => e,
                _ => return Err(CheckpointError::Corrupt(format!("tensor '{}' byte range invalid", t.name))),
            };
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if stores[g].find(&t.name).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor '{}'", t.name)));
            }
            stores[g].insert(&t.name, Tensor::from_vec(&t.shape, data), t.trainable);
        }
        let [params, m, v] = stores;
        if !params.same_layout(&m) || !params.same_layout(&v) {
            return Err(corrupt("optimizer moments do not match parameter layout"));
        }
        let mut optimizer = AdamW::new(manifest.train_config.adamw(), &params);
        optimizer.config.eps = manifest.adamw_eps;
        optimizer.t = manifest.optimizer_step;
        optimizer.m = m;
        optimizer.v = v;
        Ok(Self {
            model_config: manifest.model_config,
            train_config: manifest.train_config,
            global_step: manifest.global_step,
            params,
            optimizer,
        })
    }

    /// Rebuilds the model under `config`, naming the first tensor whose shape
    /// disagrees with it.
    pub fn model_for(&self, config: &ModelConfig) -> Result<GmaeModel, CheckpointError> {
        let reference = GmaeModel::new(config.clone(), 0)
            .map_err(|e| CheckpointError::Corrupt(format!("target config: {e}")))?;
        for e in reference.params().entries() {
            match self.params.find(&e.name) {
                None => {
                    return Err(CheckpointError::ShapeMismatch {
                        tensor: e.name.clone(),
                        expected: e.tensor.shape.clone(),
                        found: Vec::new(),
                    })
                }
                Some(id) => {
                    let found = &self.params.tensor(id).shape;
                    if found != &e.tensor.shape {
                        return Err(CheckpointError::ShapeMismatch {
                            tensor: e.name.clone(),
                            expected: e.tensor.shape.clone(),
                            found: found.clone(),
                        });
                    }
                }
            }
        }
        if let Some(extra) = self
            .params
            .entries()
            .iter()
            .find(|e| reference.params().find(&e.name).is_none())
        {
            return Err(CheckpointError::ShapeMismatch {
                tensor: extra.name.clone(),
                expected: Vec::new(),
                found: extra.tensor.shape.clone(),
            });
        }
        GmaeModel::from_params(config.clone(), self.params.clone())
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    /// Model under the checkpoint's own config.
    pub fn model(&self) -> Result<GmaeModel, CheckpointError> {
        self.model_for(&self.model_config)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    // Write-then-rename so a crash never leaves a half-written file in place.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
