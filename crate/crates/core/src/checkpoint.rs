//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FWLCKPT\0" | u32 version | u64 meta_len | meta (JSON)
//! u64 n_tensors | per tensor: u32 name_len | name | u32 rank | u64 dims[rank] | f64 payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::corpus::Tokenizer;
use crate::error::{FwlError, Result};
use crate::layer::FastMask;
use crate::params::ParamSet;
use crate::training::{AdamState, Model, TrainConfig};

const MAGIC: &[u8; 8] = b"FWLCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub tokenizer: Option<Tokenizer>,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub best_dev: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    backbone: BackboneConfig,
    d_hidden: usize,
    mask: FastMask,
    train: TrainConfig,
    tokenizer: Option<Tokenizer>,
    step: u64,
    adam_t: Option<u64>,
    best_dev: Option<f64>,
}

impl Checkpoint {
    pub fn fresh(model: Model, train: TrainConfig, tokenizer: Option<Tokenizer>) -> Self {
        Checkpoint {
            model,
            train,
            tokenizer,
            optimizer: None,
            step: 0,
            best_dev: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            backbone: self.model.backbone.config.clone(),
            d_hidden: self.model.head.d_hidden(),
            mask: self.model.steps.mask,
            train: self.train.clone(),
            tokenizer: self.tokenizer.clone(),
            step: self.step,
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            best_dev: self.best_dev,
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");

        let mut body = Vec::new();
        let mut count = 0u64;
        let mut put = |name: &str, dims: &[usize], data: &[f64]| {
            count += 1;
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in data {
                body.extend_from_slice(&x.to_le_bytes());
            }
        };
        self.model.visit(&mut put);
        if let Some(o) = &self.optimizer {
            put("adam.m", &[o.m.len()], &o.m);
            put("adam.v", &[o.v.len()], &o.v);
        }

        let mut out = Vec::with_capacity(body.len() + meta.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(FwlError::Format("missing magic header".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FwlError::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| FwlError::Format(format!("metadata: {e}")))?;
        let n = r.u64()? as usize;
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| FwlError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let count: usize = dims.iter().product();
            let raw = r.take(count.checked_mul(8).ok_or_else(|| FwlError::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, (dims, data));
        }
        if r.pos != bytes.len() {
            return Err(FwlError::Format("trailing bytes after last tensor".into()));
        }

        let mut model = Model::new(&meta.backbone, meta.d_hidden, meta.mask)?;
        let mut problem = None;
        let mut expected = BTreeMap::new();
        model.visit(&mut |name, dims, _| {
            expected.insert(name.to_string(), dims.to_vec());
        });
        model.visit_mut(&mut |name, data| {
            match tensors.get(name) {
                Some((dims, src)) if Some(dims) == expected.get(name) && src.len() == data.len() => {
                    data.copy_from_slice(src)
                }
                Some(_) => problem = Some(format!("tensor `{name}` has the wrong shape")),
                None => problem = Some(format!("tensor `{name}` is missing")),
            }
        });
        if let Some(p) = problem {
            return Err(FwlError::Format(p));
        }
        let optimizer = match meta.adam_t {
            Some(t) => {
                let get = |k: &str| {
                    tensors
                        .get(k)
                        .map(|(_, d)| d.clone())
                        .ok_or_else(|| FwlError::Format(format!("tensor `{k}` is missing")))
                };
                let (m, v) = (get("adam.m")?, get("adam.v")?);
                if m.len() != model.num_params() || v.len() != m.len() {
                    return Err(FwlError::Format("optimizer state has the wrong size".into()));
                }
                Some(AdamState { m, v, t })
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            train: meta.train,
            tokenizer: meta.tokenizer,
            optimizer,
            step: meta.step,
            best_dev: meta.best_dev,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| FwlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FwlError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FwlError::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
