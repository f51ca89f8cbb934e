//! `BRNL` v1 checkpoints.
//!
//! Layout: the 4 magic bytes `BRNL`, a little-endian `u32` version, a
//! little-endian `u64` manifest length, the JSON manifest, then every tensor
//! listed in the manifest as little-endian `f64` values, in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{DenseLayer, Mlp, NetworkSpec, ParamEma};
use crate::norm::NormState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BRNL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: need {needed} bytes, have {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct NormEntry {
    layer: usize,
    learn_gamma: bool,
    epsilon: f64,
    alpha: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: NetworkSpec,
    norms: Vec<NormEntry>,
    ema_decay: Option<f64>,
    tensors: Vec<TensorEntry>,
}

/// A model together with its optional parameter EMA.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Mlp,
    pub ema: Option<ParamEma>,
}

fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    let mut norms = Vec::new();
    for (i, (d, n)) in ck.net.dense.iter().zip(&ck.net.norms).enumerate() {
        tensors.push((format!("dense{i}.w"), &d.w));
        if let Some(b) = &d.b {
            tensors.push((format!("dense{i}.b"), b));
        }
        if let Some(n) = n {
            tensors.push((format!("norm{i}.mu"), &n.mu));
            tensors.push((format!("norm{i}.sigma"), &n.sigma));
            tensors.push((format!("norm{i}.beta"), &n.beta));
            tensors.push((format!("norm{i}.gamma"), &n.gamma));
            norms.push(NormEntry { layer: i, learn_gamma: n.learn_gamma, epsilon: n.epsilon, alpha: n.alpha, step: n.step });
        }
    }
    if let Some(ema) = &ck.ema {
        for (k, t) in ema.shadow.iter().enumerate() {
            tensors.push((format!("ema{k}"), t));
        }
    }
    let manifest = Manifest {
        spec: ck.net.spec.clone(),
        norms,
        ema_decay: ck.ema.as_ref().map(|e| e.decay),
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], CheckpointError> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    let end = end.ok_or(CheckpointError::Truncated { needed: at.saturating_add(n), actual: bytes.len() })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut at = 0;
    let magic: [u8; 4] = take(bytes, &mut at, 4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let manifest: Manifest =
        serde_json::from_slice(take(bytes, &mut at, len)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let payload_len: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum();
    if bytes.len() - at < payload_len {
        return Err(CheckpointError::Truncated { needed: at + payload_len, actual: bytes.len() });
    }
    if bytes.len() - at > payload_len {
        return Err(CheckpointError::Malformed("trailing bytes after payload".into()));
    }
    let mut tensors = std::collections::HashMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(bytes, &mut at, n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.insert(entry.name.clone(), t);
    }
    let mut get = |name: String| tensors.remove(&name).ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")));

    let spec = manifest.spec;
    spec.validate().map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let n_layers = spec.widths.len() - 1;
    let mut dense = Vec::with_capacity(n_layers);
    let mut norms = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let entry = manifest.norms.iter().find(|n| n.layer == i);
        let w = get(format!("dense{i}.w"))?;
        let b = if entry.is_none() { Some(get(format!("dense{i}.b"))?) } else { None };
        dense.push(DenseLayer { w, b });
        norms.push(match entry {
            None => None,
            Some(e) => Some(NormState {
                mu: get(format!("norm{i}.mu"))?,
                sigma: get(format!("norm{i}.sigma"))?,
                beta: get(format!("norm{i}.beta"))?,
                gamma: get(format!("norm{i}.gamma"))?,
                learn_gamma: e.learn_gamma,
                epsilon: e.epsilon,
                alpha: e.alpha,
                step: e.step,
            }),
        });
    }
    let net = Mlp { spec, dense, norms };
    let ema = match manifest.ema_decay {
        None => None,
        Some(decay) => {
            let k = net.params().len();
            let shadow = (0..k).map(|j| get(format!("ema{j}"))).collect::<Result<Vec<_>, _>>()?;
            Some(ParamEma { decay, shadow })
        }
    };
    Ok(Checkpoint { net, ema })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode(ck)).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

/// Loads a checkpoint; nothing is returned unless the whole file decodes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}
