//! Binary checkpoint: magic, version, JSON header, raw little-endian `f64`
//! tensor data and a trailing checksum.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::EncoderConfig;
use super::model::Model;
use crate::autograd::{ParamGroup, ParamStore, Tensor};
use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OVDKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    group: Option<ParamGroup>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    meta: Value,
    tensors: Vec<TensorHeader>,
}

/// Stored tensor; `group` is `None` for non-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub group: Option<ParamGroup>,
    pub tensor: Tensor,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    /// Free-form state such as the training config and step counter.
    pub meta: Value,
    pub tensors: Vec<StoredTensor>,
}

fn fnv64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::CorruptCheckpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            encoder: self.encoder.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    group: t.group,
                    shape: t.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 8 {
            return Err(Error::CorruptCheckpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut buf = body;
        if take(&mut buf, 8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if fnv64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
        }
        let hlen = u64::from_le_bytes(take(&mut buf, 8, "header length")?.try_into().expect("8 bytes"));
        let header: Header = serde_json::from_slice(take(&mut buf, hlen as usize, "header")?)
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let raw = take(&mut buf, n * 8, &th.name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(StoredTensor {
                name: th.name,
                group: th.group,
                tensor: Tensor::new(th.shape, data),
            });
        }
        if !buf.is_empty() {
            return Err(Error::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(Self {
            encoder: header.encoder,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }
}

/// Dotted keys whose values differ between two serializable values.
pub fn diff_keys<T: Serialize>(a: &T, b: &T) -> Vec<String> {
    fn walk(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let (Ok(a), Ok(b)) = (serde_json::to_value(a), serde_json::to_value(b)) else {
        return vec!["<unserializable>".into()];
    };
    let mut out = Vec::new();
    walk("", &a, &b, &mut out);
    out
}

impl Model {
    pub fn to_checkpoint(&self, meta: Value) -> Checkpoint {
        let p = self.params();
        Checkpoint {
            encoder: self.config().clone(),
            meta,
            tensors: p
                .ids()
                .map(|id| StoredTensor {
                    name: p.name(id).to_string(),
                    group: Some(p.group(id)),
                    tensor: p.get(id).clone(),
                })
                .collect(),
        }
    }

    /// Model parameters from a checkpoint. When `expected` is given the stored
    /// encoder config must equal it.
    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&EncoderConfig>) -> Result<Self> {
        if let Some(cfg) = expected {
            let diff = diff_keys(cfg, &ck.encoder);
            if !diff.is_empty() {
                return Err(Error::ConfigMismatch(
                    diff.into_iter().map(|k| format!("encoder.{k}")).collect(),
                ));
            }
        }
        let mut store = ParamStore::new();
        for t in ck.tensors.iter().filter(|t| t.group.is_some()) {
            store.register(&t.name, t.group.expect("filtered"), t.tensor.clone());
        }
        Model::from_params(ck.encoder.clone(), store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(Value::Null).save(path)
    }

    pub fn load(path: &Path, expected: Option<&EncoderConfig>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, expected)
    }
}
