//! Checkpoint persistence.
//!
//! Layout: magic `SKPM`, version u32 (LE), header length u64 (LE), a JSON
//! header (model config, feature standardization statistics, schema
//! fingerprint, seed/step, tensor directory), then raw little-endian f64
//! payloads at the directory offsets (relative to the payload start).

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, TrackCatalog};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SKPM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    feature_means: Vec<f64>,
    feature_stds: Vec<f64>,
    schema_fingerprint: String,
    seed: u64,
    step: u64,
    adam_t: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub t: u64,
    /// (parameter name, first moment, second moment), in parameter order.
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub schema_fingerprint: String,
    pub seed: u64,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        catalog: &TrackCatalog,
        schema: &FeatureSchema,
        seed: u64,
        step: u64,
        optimizer: Option<&Adam>,
    ) -> Self {
        Checkpoint {
            config: params.config.clone(),
            feature_means: catalog.means.clone(),
            feature_stds: catalog.stds.clone(),
            schema_fingerprint: schema.fingerprint(),
            seed,
            step,
            params: params.store.clone(),
            optimizer: optimizer.map(|adam| OptimizerState {
                t: adam.t,
                moments: adam.moments().map(|(n, m, v)| (n.clone(), m.clone(), v.clone())).collect(),
            }),
        }
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams { config: self.config.clone(), store: self.params.clone() }
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f64], payload: &mut Vec<u8>| {
        entries.push(TensorEntry {
            name,
            dtype: "f64".into(),
            shape,
            offset: payload.len() as u64,
            len: data.len(),
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, tensor) in ckpt.params.iter() {
        push(name.clone(), tensor.shape.clone(), &tensor.data, &mut payload);
    }
    if let Some(opt) = &ckpt.optimizer {
        for (name, m, v) in &opt.moments {
            push(format!("adam.m.{name}"), vec![m.len()], m, &mut payload);
            push(format!("adam.v.{name}"), vec![v.len()], v, &mut payload);
        }
    }

    let header = Header {
        config: ckpt.config.clone(),
        feature_means: ckpt.feature_means.clone(),
        feature_stds: ckpt.feature_stds.clone(),
        schema_fingerprint: ckpt.schema_fingerprint.clone(),
        seed: ckpt.seed,
        step: ckpt.step,
        adam_t: ckpt.optimizer.as_ref().map(|o| o.t),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path)?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() < 16 {
        return Err(Error::CorruptCheckpoint("file shorter than the fixed preamble".into()));
    }
    if &raw[0..4] != MAGIC {
        return Err(Error::CorruptCheckpoint(format!("bad magic {:?}", &raw[0..4])));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if raw.len() < payload_start {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&raw[16..payload_start])
        .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;
    let payload = &raw[payload_start..];

    let mut params = ParamStore::new();
    let mut adam_m: Vec<(String, Vec<f64>)> = Vec::new();
    let mut adam_v: Vec<(String, Vec<f64>)> = Vec::new();
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{}` has unsupported dtype `{}`",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{}` shape {:?} does not cover {} values",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len * 8;
        if end > payload.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{}` payload is truncated",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(param) = entry.name.strip_prefix("adam.m.") {
            adam_m.push((param.to_string(), data));
        } else if let Some(param) = entry.name.strip_prefix("adam.v.") {
            adam_v.push((param.to_string(), data));
        } else {
            params.insert(entry.name.clone(), Tensor::new(data, entry.shape.clone()));
        }
    }

    let optimizer = match header.adam_t {
        None => None,
        Some(t) => {
            if adam_m.len() != adam_v.len() {
                return Err(Error::CorruptCheckpoint("unpaired optimizer moments".into()));
            }
            let moments = adam_m
                .into_iter()
                .zip(adam_v)
                .map(|((name, m), (name_v, v))| {
                    if name != name_v {
                        return Err(Error::CorruptCheckpoint(format!(
                            "optimizer moments out of order: `{name}` vs `{name_v}`"
                        )));
                    }
                    Ok((name, m, v))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(OptimizerState { t, moments })
        }
    };

    Ok(Checkpoint {
        config: header.config,
        feature_means: header.feature_means,
        feature_stds: header.feature_stds,
        schema_fingerprint: header.schema_fingerprint,
        seed: header.seed,
        step: header.step,
        params,
        optimizer,
    })
}
