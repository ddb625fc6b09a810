//! Binary weight files.
//!
//! Layout (little-endian): magic `LDCK`, version `u32`, tensor count `u32`,
//! then per tensor: name length `u32`, UTF-8 name, rank `u32`, dims as
//! `u32` each, f32 payload. Buffers and trainable tensors share the format;
//! names ending in `.running_mean` / `.running_var` are loaded as buffers.

use std::path::Path;

use super::{ParamStore, Shape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in p.tensor.shape.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::format("checkpoint", format!("tensor {name} has rank {rank}")));
        }
        // Lower ranks are left-padded with ones.
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().skip(4 - rank) {
            *d = r.u32()? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let payload = n
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} is too large")))?;
        let data = r
            .take(payload)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor { shape, data };
        if is_buffer_name(&name) {
            store.add_buffer(&name, t)
        } else {
            store.add_param(&name, t)
        }
        .map_err(|_| Error::format("checkpoint", format!("duplicate tensor {name}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(store)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    // Write to a sibling file first so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(store)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
