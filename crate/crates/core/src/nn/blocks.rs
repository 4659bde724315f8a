//! Binary parameter blocks.
//!
//! Layout (all integers little-endian):
//! `b"RSPB"`, `u32` format version, `u32` tensor count, then per tensor in
//! name order: `u32` name length, UTF-8 name, `u8` dtype (0 = f32, 1 = f64),
//! `u32` rank, `u64` per dimension, raw little-endian values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RSPB";
const FORMAT_VERSION: u32 = 1;

pub fn encode_block(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => out.push(1),
            _ => out.push(0),
        }
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.dims() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match t.dtype() {
            DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            _ => flat
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated parameter block".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_block(buf: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a parameter block".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported block format {version}")));
    }
    let count = c.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let dtype = c.take(1)?[0];
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            0 => {
                let raw = c.take(4 * n)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let raw = c.take(8 * n)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            d => return Err(Error::Checkpoint(format!("unknown dtype code {d}"))),
        };
        out.insert(name, t);
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter block".into()));
    }
    Ok(out)
}

pub fn write_block(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes = encode_block(tensors)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn read_block(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    decode_block(&buf)
}
