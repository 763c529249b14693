//! Checkpoint container: `CHKP` magic, u16 version, u64 header length, a JSON
//! header (config, tensor directory, input normalization, training metadata),
//! then little-endian f32 payloads in directory order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::nn::RunningStats;
use crate::preprocess::NormStats;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CHKP";
pub const CHECKPOINT_VERSION: u16 = 1;
const PREFIX_LEN: usize = 4 + 2 + 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (magic {found:?})")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: stored shape {stored:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint model takes {stored} input channels, caller expects {expected}")]
    ChannelMismatch { stored: usize, expected: usize },
    #[error("checkpoint has no input normalization statistics")]
    MissingNormStats,
}

/// Training progress stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub iteration: u64,
    pub best_iteration: Option<u64>,
    pub best_val_loss: Option<f64>,
    /// Optimizer step count; moments are stored as extra tensors.
    pub optimizer_step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    norm_stats: Option<NormStats>,
    train_meta: TrainMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub meta: TrainMeta,
    /// Additional named tensors, e.g. optimizer moments.
    pub extra: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Fails unless the stored model takes `in_channels` inputs.
    pub fn expect_channels(&self, in_channels: usize) -> Result<(), CheckpointError> {
        let stored = self.params.config().in_channels;
        if stored != in_channels {
            return Err(CheckpointError::ChannelMismatch {
                stored,
                expected: in_channels,
            });
        }
        Ok(())
    }
}

fn running_names(u: usize) -> (String, String) {
    let (b, s) = (u / 2, u % 2);
    (
        format!("block{b}.sep{s}.bn.running_mean"),
        format!("block{b}.sep{s}.bn.running_var"),
    )
}

pub fn encode_checkpoint(
    params: &ModelParams<f32>,
    meta: &TrainMeta,
    extra: &[(String, Tensor<f32>)],
) -> Vec<u8> {
    let cfg = params.config();
    let mut all: Vec<(String, &Tensor<f32>)> = params
        .names()
        .iter()
        .cloned()
        .zip(params.tensors())
        .collect();
    for (u, r) in params.running_stats().iter().enumerate() {
        let (m, v) = running_names(u);
        all.push((m, &r.mean));
        all.push((v, &r.var));
    }
    all.extend(extra.iter().map(|(n, t)| (n.clone(), t)));

    let mut offset = 0u64;
    let tensors = all
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = Header {
        config: cfg.clone(),
        norm_stats: params.norm_stats.clone(),
        train_meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &all {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < PREFIX_LEN {
        return Err(CheckpointError::Truncated(format!(
            "{} bytes, prefix needs {PREFIX_LEN}",
            bytes.len()
        )));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hlen = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let hend = (PREFIX_LEN as u64)
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| CheckpointError::Truncated(format!("header of {hlen} bytes")))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..hend])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let cfg = header.config.clone();
    cfg.validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[hend..];

    let read = |e: &TensorEntry| -> Result<Tensor<f32>, CheckpointError> {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start
            .checked_add(4 * n)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| {
                CheckpointError::Truncated(format!(
                    "tensor {} needs payload bytes {start}..{}, have {}",
                    e.name,
                    start + 4 * n,
                    payload.len()
                ))
            })?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(&e.shape, data).map_err(|err| CheckpointError::Header(err.to_string()))
    };
    let find = |name: &str, expected: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
        let e = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Header(format!("missing tensor {name}")))?;
        if e.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                stored: e.shape.clone(),
                expected: expected.to_vec(),
            });
        }
        read(e)
    };

    let layout = cfg.param_layout();
    let tensors = layout
        .iter()
        .map(|(name, shape)| find(name, shape))
        .collect::<Result<Vec<_>, _>>()?;
    let running = (0..cfg.n_units())
        .map(|u| {
            let (m, v) = running_names(u);
            let c = [cfg.trunk_width];
            Ok(RunningStats {
                mean: find(&m, &c)?,
                var: find(&v, &c)?,
            })
        })
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    let n_core = layout.len() + 2 * cfg.n_units();
    let extra = header.tensors[n_core.min(header.tensors.len())..]
        .iter()
        .map(|e| Ok((e.name.clone(), read(e)?)))
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    Ok(Checkpoint {
        params: ModelParams::from_parts(cfg, tensors, running, header.norm_stats),
        meta: header.train_meta,
        extra,
    })
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    meta: &TrainMeta,
    extra: &[(String, Tensor<f32>)],
) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(params, meta, extra)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
