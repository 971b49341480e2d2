//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `ATSECKPT`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.
//! Values are stored as `f32`; a checkpoint loaded and saved again is
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::Tensor;
use super::{ModelConfig, ModelKind, ParamStore};
use crate::audio::write_atomic;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ATSECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Optimizer steps taken.
    pub step: u64,
    pub epochs_completed: usize,
    /// Seeds from the experiment root down to this training run.
    pub seed_lineage: Vec<u64>,
    pub optimizer: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    config: ModelConfig,
    step: u64,
    epochs_completed: usize,
    seed_lineage: Vec<u64>,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Rounds every value to the nearest `f32`, the precision of the container.
pub fn round_to_f32(params: &mut ParamStore) {
    for t in params.values_mut() {
        t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore, step: u64, seed: u64) -> Self {
        Checkpoint {
            config,
            params,
            step,
            epochs_completed: 0,
            seed_lineage: vec![seed],
            optimizer: None,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor)> =
            self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t)));
            tensors.extend(opt.v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t)));
        }
        let mut entries = Vec::with_capacity(tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                rows: t.rows,
                cols: t.cols,
                offset: payload.len(),
            });
            for v in &t.data {
                if !v.is_finite() {
                    return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
                }
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind(),
            config: self.config.clone(),
            step: self.step,
            epochs_completed: self.epochs_completed,
            seed_lineage: self.seed_lineage.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        if header.kind != header.config.kind() {
            return Err(Error::Checkpoint("header kind disagrees with config".into()));
        }
        let payload = &bytes[16 + hlen..];
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut expected = 0;
        for e in &header.tensors {
            let n = e.rows * e.cols;
            if e.offset != expected || e.offset + 4 * n > payload.len() {
                return Err(Error::Checkpoint(format!("tensor {} has a bad offset", e.name)));
            }
            let data = payload[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let t = Tensor::new(e.rows, e.cols, data);
            if let Some(name) = e.name.strip_prefix(M_PREFIX) {
                m.insert(name.to_string(), t);
            } else if let Some(name) = e.name.strip_prefix(V_PREFIX) {
                v.insert(name.to_string(), t);
            } else {
                params.insert(e.name.clone(), t);
            }
            expected += 4 * n;
        }
        if expected != payload.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        let optimizer = header.optimizer_step.map(|step| AdamState { step, m, v });
        Ok(Checkpoint {
            config: header.config,
            params,
            step: header.step,
            epochs_completed: header.epochs_completed,
            seed_lineage: header.seed_lineage,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
