//! `DOTA` checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DOTA" | version u16 | text_len u32 | key = value text
//! then, until end of file, named tensors:
//! name_len u16 | name | rank u8 | dims u32 x rank | f32 data
//! ```
//!
//! The text holds the model config followed by free-form metadata keys
//! prefixed with `meta.`. Tensors that are not model parameters (optimizer
//! moments, for instance) are returned as extras.

use std::fs;
use std::path::Path;

use super::params::param_specs;
use super::{Dota, ModelConfig, ParamStore};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DOTA";
pub const CHECKPOINT_VERSION: u16 = 1;
const META_PREFIX: &str = "meta.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Dota<f32>,
    pub meta: KeyValues,
    pub extras: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(model: Dota<f32>) -> Self {
        Checkpoint {
            model,
            meta: KeyValues::new(),
            extras: Vec::new(),
        }
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut text = ckpt.model.config().to_key_values();
    for (k, v) in ckpt.meta.iter() {
        text.set(&format!("{}{}", META_PREFIX, k), v);
    }
    let text = text.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in ckpt.model.params().iter() {
        put_tensor(&mut out, name, t);
    }
    for (name, t) in &ckpt.extras {
        put_tensor(&mut out, name, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::format(path, "missing DOTA magic"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {}", version),
        ));
    }
    let text_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|_| Error::format(path, "config text is not UTF-8"))?;
    let kv = KeyValues::parse(text).map_err(|e| Error::format(path, e.to_string()))?;
    let mut config_kv = KeyValues::new();
    let mut meta = KeyValues::new();
    for (k, v) in kv.iter() {
        match k.strip_prefix(META_PREFIX) {
            Some(m) => meta.set(m, v),
            None => config_kv.set(k, v),
        }
    }
    let config =
        ModelConfig::from_key_values(&config_kv).map_err(|e| Error::format(path, e.to_string()))?;

    let param_names: Vec<String> = param_specs(&config).into_iter().map(|s| s.name).collect();
    let mut params = Vec::new();
    let mut extras = Vec::new();
    while !r.done() {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::format(path, format!("tensor '{}' dims overflow", name)))?;
        let data: Vec<f32> = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::format(path, format!("tensor '{}': {}", name, e)))?;
        if param_names.contains(&name) {
            params.push((name, t));
        } else {
            extras.push((name, t));
        }
    }
    let params = ParamStore::from_named(params).map_err(|e| Error::format(path, e.to_string()))?;
    if params.tensors().iter().any(|t| !t.all_finite()) {
        return Err(Error::format(path, "non-finite parameter value"));
    }
    let model =
        Dota::from_params(config, params).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint {
        model,
        meta,
        extras,
    })
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(ckpt)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
