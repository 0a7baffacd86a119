//! Binary container for named `f64` tensors.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic      8 bytes   "HFLCKPT\0"
//! version    u32       1
//! meta_len   u32       byte length of the metadata text
//! meta       bytes     UTF-8 (JSON by convention; may be empty)
//! count      u32       number of tensors
//! count times, in ascending name order:
//!   name_len u32
//!   name     bytes     UTF-8
//!   ndim     u32
//!   dims     u64 * ndim
//!   payload  f64 * prod(dims), IEEE-754 little-endian
//! ```
//!
//! Trailing bytes after the last tensor are rejected. Decoding then
//! re-encoding reproduces the input bytes exactly.

use std::path::Path;

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HFLCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet, meta: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamSet, String)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta = r.string(meta_len)?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        if prev.as_ref().is_some_and(|p| p >= &name) {
            return Err(Error::Format(format!("tensor `{name}` out of order or duplicated")));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        params.insert(name.clone(), t);
        prev = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok((params, meta))
}

pub fn save(path: &Path, params: &ParamSet, meta: &str) -> Result<()> {
    std::fs::write(path, encode(params, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamSet, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
