//! Parameter files:
//!
//! ```text
//! "SVCW" version:u8 preset:u8 count:u32
//! per entry: name_len:u16 name rank:u8 dims:u32[rank] values:f32[..]
//! ```
//! All integers and reals little-endian.

use std::fs;
use std::path::Path;

use crate::codec::SlimVcModel;
use crate::error::{Error, Result};
use crate::slim::Preset;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SVCW";
pub const VERSION: u8 = 1;

pub fn to_bytes(model: &SlimVcModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * model.store.numel() + 64 * model.store.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(model.preset().id());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|e| self.b.get(self.pos..e))
            .ok_or_else(|| Error::Truncated("checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Preset recorded in a checkpoint, read without building a model.
pub fn peek_preset(bytes: &[u8]) -> Result<Preset> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(Error::format("not a SVCW checkpoint"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {}", bytes[4])));
    }
    Preset::from_id(bytes[5])
}

/// Overwrites every parameter of `model`. Names, shapes and the preset must
/// all match; missing or extra entries are rejected.
pub fn load_into(model: &mut SlimVcModel, bytes: &[u8]) -> Result<()> {
    let preset = peek_preset(bytes)?;
    if preset != model.preset() {
        return Err(Error::format(format!(
            "checkpoint holds a {preset} model, expected {}",
            model.preset()
        )));
    }
    let mut c = Cursor { b: bytes, pos: 6 };
    let count = c.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::format(format!(
            "checkpoint has {count} tensors, model has {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let nl = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(nl)?)
            .map_err(|_| Error::format("checkpoint entry name is not UTF-8"))?
            .to_string();
        let key = model
            .store
            .key(&name)
            .ok_or_else(|| Error::format(format!("unknown checkpoint entry {name}")))?;
        if std::mem::replace(&mut seen[key], true) {
            return Err(Error::format(format!("duplicate checkpoint entry {name}")));
        }
        let rank = c.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != model.store.get(key).shape() {
            return Err(Error::shape(format!(
                "checkpoint entry {name} is {dims:?}, model expects {:?}",
                model.store.get(key).shape()
            )));
        }
        let n: usize = dims.iter().product();
        let raw = c.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        model.store.set(key, Tensor::new(dims, data)?)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::format("trailing bytes after the last checkpoint entry"));
    }
    Ok(())
}

pub fn save(model: &SlimVcModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

/// Builds a model of the recorded preset and fills it from `path`.
pub fn load(path: &Path) -> Result<SlimVcModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut m = SlimVcModel::new(peek_preset(&bytes)?, 0);
    load_into(&mut m, &bytes)?;
    Ok(m)
}
