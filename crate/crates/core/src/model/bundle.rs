//! `weights.cinf` reader and writer.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CINF" | u32 version=1 | u64 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 rank | u64 dims[rank] | data
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CINF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(tensors: &[RawTensor]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|t| t.data.len() * 4 + t.name.len() + 64).sum();
    let mut buf = Vec::with_capacity(payload + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(t.dims.len() as u8);
        for &d in &t.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn write(path: &Path, tensors: &[RawTensor]) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<RawTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                reason: format!("unexpected end of data reading {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<RawTensor>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "CINF",
        });
    }
    if bytes.len() < 4 + 4 + 8 + 4 {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let mut cur = Cursor {
        bytes: body,
        pos: 4,
        path,
    };
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let count = cur.u64("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| Error::Malformed {
                path: path.to_path_buf(),
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let dtype = cur.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype { name, dtype });
        }
        let rank = cur.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64("dims")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("tensor {name} dims overflow"),
            })?;
        let raw = cur.take(numel, &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(RawTensor { name, dims, data });
    }
    if cur.pos != body.len() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes after last tensor", body.len() - cur.pos),
        });
    }
    Ok(out)
}
