//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic      8 bytes  "APRCKPT\0"
//! version    u32      1
//! config     u32 length + UTF-8 TOML of the ModelConfig
//! count      u32      number of tensors
//! tensor     u32 name length + UTF-8 name,
//!            u32 rank, rank × u64 extents,
//!            numel × f64 values
//! ```
//!
//! Tensors appear in parameter registration order, so the same model always
//! serializes to the same bytes.

use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::network::Model;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"APRCKPT\0";
const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = toml::to_string(&model.config)
        .map_err(|e| Error::Checkpoint(format!("serializing config: {e}")))?;
    put_str(&mut out, &config);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, p) in model.store.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds a model from checkpoint bytes. The architecture comes from the
/// embedded config; every parameter must be present with a matching shape.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_text = r.string()?;
    let config: ModelConfig = toml::from_str(&config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let mut model = Model::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} tensors, model has {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
        if model.store.value(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {shape:?}, model expects {:?}",
                model.store.value(id).shape()
            )));
        }
        model.store.replace(id, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }
}
