//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `MMPK`, `u32` version, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u8` trainable flag,
//! `u32` rank, `u64` per axis, `f64` values.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{hex, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MMPK";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::from(p.trainable));
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for s in shape {
            out.extend_from_slice(&(*s as u64).to_le_bytes());
        }
        for v in p.value.data() {
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
        let end = end.ok_or_else(|| Error::Io("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
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

pub fn decode(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Io("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Io(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Io("tensor name is not UTF-8".into()))?
            .to_string();
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| r.u64().map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        store.insert(name, Tensor::new(shape, data)?, trainable);
    }
    if r.pos != buf.len() {
        return Err(Error::Io("trailing bytes after checkpoint".into()));
    }
    Ok(store)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes the container and returns its SHA-256.
pub fn save(store: &ParamStore, path: &Path) -> Result<String> {
    let bytes = encode(store);
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&fs::read(path)?)
}
