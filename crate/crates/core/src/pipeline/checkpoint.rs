//! Binary checkpoints.
//!
//! Layout: the magic bytes `FNET`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every tensor of
//! the header's `tensors` list as raw little-endian `f32` in list order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::architecture::{FusionNet, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, BatchNormStats, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FNET";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

/// Position in the training schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: u64,
    pub step_in_epoch: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
}

/// Everything needed to resume training or run inference. Random streams
/// are derived from the seed and the progress counters, so those two fully
/// describe the generator state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub net: FusionNet<f32>,
    pub adam: AdamState<f32>,
    pub progress: Progress,
    pub history: Vec<f64>,
    /// Number of training samples before enrichment.
    pub dataset_len: usize,
}

impl Checkpoint {
    pub fn spec(&self) -> &NetworkSpec {
        self.net.spec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    RunningMean,
    RunningVar,
    AdamFirst,
    AdamSecond,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    role: Role,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct NormMeta {
    name: String,
    momentum: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    config: TrainConfig,
    progress: Progress,
    dataset_len: usize,
    history: Vec<f64>,
    adam_config: AdamConfig,
    adam_step: u64,
    norms: Vec<NormMeta>,
    tensors: Vec<TensorMeta>,
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let net = &ckpt.net;
    let mut tensors = Vec::new();
    let mut payload: Vec<&[f32]> = Vec::new();
    for p in net.params().iter() {
        tensors.push(TensorMeta {
            name: p.name.clone(),
            role: Role::Param,
            shape: p.value.shape().0.to_vec(),
        });
        payload.push(p.value.data());
    }
    for (name, st) in net.running_stats() {
        for (role, v) in [(Role::RunningMean, &st.mean), (Role::RunningVar, &st.var)] {
            tensors.push(TensorMeta {
                name: name.clone(),
                role,
                shape: vec![v.len()],
            });
            payload.push(v);
        }
    }
    if ckpt.adam.first.len() != net.params().len() || ckpt.adam.second.len() != net.params().len() {
        return Err(Error::InvalidArgument("optimizer state does not match the network".into()));
    }
    for (role, moments) in [(Role::AdamFirst, &ckpt.adam.first), (Role::AdamSecond, &ckpt.adam.second)] {
        for (p, m) in net.params().iter().zip(moments) {
            tensors.push(TensorMeta {
                name: p.name.clone(),
                role,
                shape: vec![m.len()],
            });
            payload.push(m);
        }
    }
    let header = Header {
        spec: net.spec().clone(),
        config: ckpt.config.clone(),
        progress: ckpt.progress,
        dataset_len: ckpt.dataset_len,
        history: ckpt.history.clone(),
        adam_config: ckpt.adam.config,
        adam_step: ckpt.adam.step,
        norms: net
            .running_stats()
            .iter()
            .map(|(name, st)| NormMeta {
                name: name.clone(),
                momentum: st.momentum,
                eps: st.eps,
            })
            .collect(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let floats: usize = payload.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in payload {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(offset: usize, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses a checkpoint, validating sizes before any tensor is allocated.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE {
        return Err(corrupt(bytes.len(), format!("file is {} bytes, shorter than the preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(0, "bad magic, not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(4, format!("unsupported format version {version}, expected {VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let available = (bytes.len() - PREAMBLE) as u64;
    if header_len > available {
        return Err(corrupt(
            8,
            format!("header length {header_len} exceeds the {available} bytes that follow"),
        ));
    }
    let body_start = PREAMBLE + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body_start])
        .map_err(|e| corrupt(PREAMBLE, format!("header is not valid: {e}")))?;

    let mut expected = 0u64;
    for t in &header.tensors {
        let n = t
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(PREAMBLE, format!("tensor `{}` size overflows", t.name)))?;
        expected = expected
            .checked_add(n)
            .ok_or_else(|| corrupt(PREAMBLE, "payload size overflows"))?;
    }
    let actual = (bytes.len() - body_start) as u64;
    if actual != expected {
        let at = if actual < expected { bytes.len() } else { body_start + expected as usize };
        return Err(corrupt(
            at,
            format!("payload is {actual} bytes, header describes {expected}"),
        ));
    }

    let mut offset = body_start;
    let mut read = |t: &TensorMeta| -> Vec<f32> {
        let n: usize = t.shape.iter().product();
        let v = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        v
    };

    let mut params = Vec::new();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for t in &header.tensors {
        let data = read(t);
        match t.role {
            Role::Param => {
                let shape: [usize; 4] = t.shape.as_slice().try_into().map_err(|_| {
                    corrupt(PREAMBLE, format!("parameter `{}` has rank {}, expected 4", t.name, t.shape.len()))
                })?;
                params.push((t.name.clone(), Tensor::from_vec(Shape(shape), data)?));
            }
            Role::RunningMean => means.push((t.name.clone(), data)),
            Role::RunningVar => vars.push((t.name.clone(), data)),
            Role::AdamFirst => first.push(data),
            Role::AdamSecond => second.push(data),
        }
    }
    if means.len() != header.norms.len() || vars.len() != header.norms.len() {
        return Err(corrupt(PREAMBLE, "norm statistics do not match the norm list"));
    }
    let mut stats = Vec::with_capacity(means.len());
    for ((meta, (mname, mean)), (vname, var)) in header.norms.iter().zip(means).zip(vars) {
        if meta.name != mname || mname != vname {
            return Err(corrupt(PREAMBLE, format!("norm statistics for `{}` are out of order", meta.name)));
        }
        stats.push((
            mname,
            BatchNormStats {
                mean,
                var,
                momentum: meta.momentum,
                eps: meta.eps,
            },
        ));
    }
    let net = FusionNet::from_parts(header.spec, params, stats).map_err(|e| corrupt(PREAMBLE, e.to_string()))?;
    if first.len() != net.params().len() || second.len() != net.params().len() {
        return Err(corrupt(PREAMBLE, "optimizer moments do not match the parameter list"));
    }
    for ((p, m), v) in net.params().iter().zip(&first).zip(&second) {
        if m.len() != p.value.len() || v.len() != p.value.len() {
            return Err(corrupt(PREAMBLE, format!("optimizer moments for `{}` have the wrong size", p.name)));
        }
    }
    Ok(Checkpoint {
        config: header.config,
        net,
        adam: AdamState {
            config: header.adam_config,
            step: header.adam_step,
            first,
            second,
        },
        progress: header.progress,
        history: header.history,
        dataset_len: header.dataset_len,
    })
}

/// Writes through a temporary file and renames, so an existing checkpoint is
/// never left half-written.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::file(&tmp, format!("cannot create: {e}")))?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, format!("cannot replace: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, format!("cannot read: {e}")))?;
    decode(&bytes).map_err(|e| Error::file(path, e.to_string()))
}
