//! Binary checkpoint archive.
//!
//! Layout: the magic bytes `PXTACKPT`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then every tensor's values as
//! little-endian `f32` in header order. Parameters live on the `f32` grid,
//! so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::proxy::{ProxyConfig, ProxyHeads};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PXTACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub heads: Option<ProxyHeads>,
    /// Free-form provenance (stage, seed, step counters).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ProxyHeader {
    config: ProxyConfig,
    in_dim: usize,
    prepared: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    tensors: Vec<TensorEntry>,
    proxy: Option<ProxyHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: ModelParams) -> Self {
        Checkpoint {
            model,
            heads: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let all: Vec<(&String, &Tensor)> = self
            .model
            .tensors()
            .iter()
            .chain(self.heads.iter().flat_map(|h| h.tensors().iter()))
            .collect();
        let header = Header {
            model_config: self.model.config.clone(),
            tensors: all
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: (*n).clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            proxy: self.heads.as_ref().map(|h| ProxyHeader {
                config: h.config.clone(),
                in_dim: h.in_dim,
                prepared: h.is_prepared(),
            }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * all.iter().map(|(_, t)| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in all {
            for &v in t.data() {
                let f = v as f32;
                if f as f64 != v {
                    return Err(Error::Contract(format!("{name} holds {v}, which is not an f32 value")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses an archive; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(origin, m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        let mut pos = 20 + hlen;
        let mut model = BTreeMap::new();
        let mut heads = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| bad(format!("truncated data for {}", entry.name)))?;
            pos += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::from_vec(&entry.shape, data);
            if entry.name.starts_with("proxy/") {
                heads.insert(entry.name, t);
            } else {
                model.insert(entry.name, t);
            }
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let model = ModelParams::from_tensors(header.model_config, model)?;
        let heads = match header.proxy {
            Some(p) => Some(ProxyHeads::from_tensors(p.config, p.in_dim, heads, p.prepared)?),
            None if heads.is_empty() => None,
            None => return Err(bad("proxy tensors without a proxy header".into())),
        };
        Ok(Checkpoint {
            model,
            heads,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
