//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "TKDCKPT\0"
//! version      u32      FORMAT_VERSION
//! meta_len     u32      byte length of the metadata block
//! meta         UTF-8    "key=value\n" lines in insertion order
//!                       (a model checkpoint echoes its config here)
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32
//!   name       UTF-8
//!   group      u8       ParamGroup code
//!   ndim       u32
//!   dims       u64 × ndim
//!   payload    f64 × product(dims)
//! ```
//!
//! Decoding then encoding reproduces the input byte for byte.

use std::path::Path;

use super::params::{Param, ParamGroup, ParamSet};
use super::{EncoderModel, ModelConfig, ModelError};
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 8] = b"TKDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<Param>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<String, ModelError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for p in &self.tensors {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.group.code());
            out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = r.utf8(meta_len)?;
        let mut meta = Vec::new();
        for line in meta_text.split_terminator('\n') {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Checkpoint(format!("bad metadata line {line:?}")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.utf8(name_len)?;
            let code = r.u8()?;
            let group = ParamGroup::from_code(code)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown group code {code}")))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| ModelError::Checkpoint("shape overflow".into()))?;
            let bytes = r.take(numel.checked_mul(8).ok_or_else(|| ModelError::Checkpoint("shape overflow".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(&dims, data).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            tensors.push(Param { name, group, tensor });
        }
        if r.pos != buf.len() {
            return Err(ModelError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let buf = std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Reads the config echoed in the metadata.
    pub fn config(&self) -> Result<ModelConfig, ModelError> {
        let get = |k: &str| -> Result<usize, ModelError> {
            self.meta(k)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing metadata key {k}")))?
                .parse()
                .map_err(|e| ModelError::Checkpoint(format!("{k}: {e}")))
        };
        let cfg = ModelConfig {
            layers: get("layers")?,
            hidden: get("hidden")?,
            ffn: get("ffn")?,
            heads: get("heads")?,
            vocab_size: get("vocab_size")?,
            max_positions: get("max_positions")?,
            type_vocab: get("type_vocab")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn config_meta(config: &ModelConfig) -> Vec<(String, String)> {
    [
        ("layers", config.layers),
        ("hidden", config.hidden),
        ("ffn", config.ffn),
        ("heads", config.heads),
        ("vocab_size", config.vocab_size),
        ("max_positions", config.max_positions),
        ("type_vocab", config.type_vocab),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

impl EncoderModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: config_meta(self.config()),
            tensors: self
                .params()
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.detach(),
                })
                .collect(),
        }
    }

    /// Loads the model tensors from a checkpoint, ignoring any extra tensors
    /// (optimizer moments, projections) stored alongside.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let config = ckpt.config()?;
        let fresh = Self::init(config, 0)?;
        let mut params = Vec::with_capacity(fresh.params().len());
        for want in fresh.params().iter() {
            let found = ckpt
                .tensors
                .iter()
                .find(|p| p.name == want.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {}", want.name)))?;
            params.push(found.clone());
        }
        Self::from_params(config, ParamSet::from_vec(params))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
