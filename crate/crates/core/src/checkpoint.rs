//! Versioned binary checkpoint.
//!
//! ```text
//! magic       8 bytes  "DACTCKPT"
//! version     u32
//! header_len  u32      then header_len bytes of UTF-8 key=value lines:
//!                      the model config keys plus free-form `meta.*` keys
//! count       u32      then, per parameter:
//!   name_len  u32      then name_len bytes of UTF-8
//!   ndim      u32      then ndim x u64 dimensions
//!   values    f64 x product(dims)
//! ```
//!
//! All integers and floats are little-endian. Parameters appear in model
//! order; values round-trip bit for bit.

use std::path::Path;

use crate::backbone::{Model, ModelConfig};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DACTCKPT";
pub const VERSION: u32 = 1;
const META_PREFIX: &str = "meta.";

pub fn to_bytes(model: &Model, meta: &KvMap) -> Vec<u8> {
    let mut header = KvMap::new();
    model.config().write_kv(&mut header);
    for k in meta.keys() {
        header.set(&format!("{META_PREFIX}{k}"), meta.get_str(k).unwrap_or_default());
    }
    let header = header.render();

    let mut out = Vec::with_capacity(64 + model.params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.shape.len() as u32).to_le_bytes());
        for &d in &p.tensor.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// Decodes a checkpoint into a model and its `meta.*` entries (prefix
/// stripped).
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, KvMap)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = c.u32()? as usize;
    let header = KvMap::parse(c.str(hlen)?)?;
    let mut base = ModelConfig::default();
    for key in ModelConfig::KEYS {
        if header.get_str(key).is_none() {
            return Err(Error::Checkpoint(format!("header lacks `{key}`")));
        }
    }
    base = base.merged(&header)?;
    let mut meta = KvMap::new();
    for k in header.keys() {
        if let Some(stripped) = k.strip_prefix(META_PREFIX) {
            meta.set(stripped, header.get_str(k).unwrap_or_default());
        }
    }

    let count = c.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = c.str(nlen)?.to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last parameter",
            bytes.len() - c.pos
        )));
    }
    Ok((Model::from_params(base, params)?, meta))
}

pub fn save(path: &Path, model: &Model, meta: &KvMap) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, KvMap)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
