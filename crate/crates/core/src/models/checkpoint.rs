//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model config, `fused` flag, dtype, tensor table, free-form
//! metadata), then the raw little-endian tensor data in table order. All
//! integers are little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelInstance};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EDBLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const SET_PARAMS: &str = "params";
const SET_BUFFERS: &str = "buffers";
const SET_EMA: &str = "ema";

/// Which weights to instantiate a model from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSet {
    Raw,
    Ema,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    set: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    fused: bool,
    dtype: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// In-memory checkpoint: named tensor sets plus config and metadata. The
/// `params` and `buffers` sets always exist; `ema` and any optimizer sets are
/// optional.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub fused: bool,
    pub dtype: DType,
    pub sets: BTreeMap<String, BTreeMap<String, Tensor>>,
    pub meta: serde_json::Value,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn snapshot(vars: &BTreeMap<String, candle_core::Var>) -> Result<BTreeMap<String, Tensor>> {
    vars.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &ModelInstance) -> Result<Self> {
        let mut sets = BTreeMap::new();
        sets.insert(SET_PARAMS.to_string(), snapshot(model.parameters())?);
        sets.insert(SET_BUFFERS.to_string(), snapshot(model.buffers())?);
        Ok(Self {
            config: model.config().clone(),
            fused: model.is_fused(),
            dtype: model.dtype(),
            sets,
            meta: serde_json::Value::Null,
        })
    }

    pub fn with_set(mut self, name: &str, tensors: BTreeMap<String, Tensor>) -> Self {
        self.sets.insert(name.to_string(), tensors);
        self
    }

    pub fn with_ema(self, shadow: BTreeMap<String, Tensor>) -> Self {
        self.with_set(SET_EMA, shadow)
    }

    pub fn set(&self, name: &str) -> Option<&BTreeMap<String, Tensor>> {
        self.sets.get(name)
    }

    pub fn has_ema(&self) -> bool {
        self.sets.contains_key(SET_EMA)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let elem = self.dtype.size_in_bytes();
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for (set, tensors) in &self.sets {
            for (name, t) in tensors {
                entries.push(TensorEntry {
                    set: set.clone(),
                    name: name.clone(),
                    shape: t.dims().to_vec(),
                    offset: (data.len() / elem) as u64,
                });
                let flat = t.to_dtype(self.dtype)?.flatten_all()?;
                match self.dtype {
                    DType::F32 => {
                        for v in flat.to_vec1::<f32>()? {
                            data.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                    DType::F64 => {
                        for v in flat.to_vec1::<f64>()? {
                            data.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                    other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            fused: self.fused,
            dtype: dtype_name(self.dtype)?.to_string(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("file is truncated".into());
        if bytes.len() < 20 {
            return Err(truncated());
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.checked_add(hlen).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let dtype = match header.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
        };
        let data = &bytes[20 + hlen..];
        let elem = dtype.size_in_bytes();
        let mut expected = 0usize;
        let mut sets: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize * elem;
            let chunk = data.get(start..start + n * elem).ok_or_else(truncated)?;
            let t = match dtype {
                DType::F32 => {
                    let v: Vec<f32> = chunk
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
                _ => {
                    let v: Vec<f64> = chunk
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
                }
            };
            expected = expected.max(start + n * elem);
            sets.entry(e.set.clone())
                .or_default()
                .insert(e.name.clone(), t);
        }
        if data.len() != expected {
            return Err(Error::Checkpoint(format!(
                "data section has {} bytes, header describes {expected}",
                data.len()
            )));
        }
        sets.entry(SET_PARAMS.into()).or_default();
        sets.entry(SET_BUFFERS.into()).or_default();
        Ok(Self {
            config: header.config,
            fused: header.fused,
            dtype,
            sets,
            meta: header.meta,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Builds an eval-mode model from the raw or EMA weights.
    pub fn instantiate(&self, weights: WeightSet) -> Result<ModelInstance> {
        let params = match weights {
            WeightSet::Raw => &self.sets[SET_PARAMS],
            WeightSet::Ema => self
                .sets
                .get(SET_EMA)
                .ok_or_else(|| Error::Checkpoint("checkpoint has no EMA weights".into()))?,
        };
        let mut store = ParamStore::new(self.dtype, 0);
        for (k, t) in params {
            store.insert_param(k, t)?;
        }
        for (k, t) in &self.sets[SET_BUFFERS] {
            store.insert_buffer(k, t)?;
        }
        ModelInstance::from_store(&self.config, store, self.fused)
    }
}

/// Saves `model` (and EMA shadow weights when given).
pub fn save_checkpoint(
    model: &ModelInstance,
    ema: Option<&BTreeMap<String, Tensor>>,
    path: &Path,
) -> Result<()> {
    let mut ck = Checkpoint::from_model(model)?;
    if let Some(shadow) = ema {
        ck = ck.with_ema(shadow.clone());
    }
    ck.write(path)
}

pub fn load_checkpoint(path: &Path, weights: WeightSet) -> Result<ModelInstance> {
    Checkpoint::read(path)?.instantiate(weights)
}
