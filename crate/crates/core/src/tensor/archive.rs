//! Tensor archive: the on-disk format for checkpoints, masks and golden files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"EBKT1"
//! repeated until EOF:
//!     u32    name length in bytes
//!     [u8]   name, UTF-8
//!     u8     dtype tag (0 = f32, 1 = f64, 2 = u8)
//!     u8     rank
//!     u64    extent, `rank` times
//!     [u8]   payload, product(extents) * width(dtype) bytes
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel, DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"EBKT1";

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArchiveData {
    pub fn dtype(&self) -> DType {
        match self {
            ArchiveData::F32(_) => DType::F32,
            ArchiveData::F64(_) => DType::F64,
            ArchiveData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArchiveData::F32(v) => v.len(),
            ArchiveData::F64(v) => v.len(),
            ArchiveData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Float payload converted to `T`; `None` for byte payloads.
    pub fn to_scalars<T: Scalar>(&self) -> Option<Vec<T>> {
        match self {
            ArchiveData::F32(v) => Some(v.iter().map(|&x| T::from_f64(x as f64)).collect()),
            ArchiveData::F64(v) => Some(v.iter().map(|&x| T::from_f64(x)).collect()),
            ArchiveData::U8(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArchiveData,
}

impl ArchiveEntry {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F64 => ArchiveData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
            _ => ArchiveData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
        };
        ArchiveEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let values = self.data.to_scalars().ok_or_else(|| {
            Error::shape(
                "archive",
                format!("entry {} holds bytes, not floats", self.name),
            )
        })?;
        Tensor::new(self.shape.clone(), values)
    }
}

pub fn encode(entries: &[ArchiveEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for e in entries {
        if numel(&e.shape) != e.data.len() {
            return Err(Error::shape(
                "archive",
                format!(
                    "entry {} has shape {:?} but {} values",
                    e.name,
                    e.shape,
                    e.data.len()
                ),
            ));
        }
        let rank = u8::try_from(e.shape.len())
            .map_err(|_| Error::shape("archive", format!("rank {} too large", e.shape.len())))?;
        let name_len = u32::try_from(e.name.len())
            .map_err(|_| Error::shape("archive", "name longer than u32::MAX bytes"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.data.dtype().tag());
        out.push(rank);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &e.data {
            ArchiveData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArchiveData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArchiveData::U8(v) => out.extend_from_slice(v),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Decodes an archive. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<ArchiveEntry>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(path, "missing EBKT1 magic"));
    }
    let mut cur = Cursor {
        buf: bytes,
        pos: MAGIC.len(),
        path,
    };
    let mut entries = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let tag = cur.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::format(path, format!("unknown dtype tag {tag}")))?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(cur.u64()?)
                .map_err(|_| Error::format(path, "extent overflows usize"))?;
            shape.push(d);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(path, "element count overflows"))?;
        let nbytes = count
            .checked_mul(dtype.width())
            .ok_or_else(|| Error::format(path, "payload size overflows"))?;
        let raw = cur.take(nbytes)?;
        let data = match dtype {
            DType::F32 => ArchiveData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => ArchiveData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U8 => ArchiveData::U8(raw.to_vec()),
        };
        entries.push(ArchiveEntry { name, shape, data });
    }
    Ok(entries)
}

pub fn write(path: &Path, entries: &[ArchiveEntry]) -> Result<()> {
    let bytes = encode(entries)?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read(path: &Path) -> Result<Vec<ArchiveEntry>> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

pub fn write_to(mut w: impl Write, entries: &[ArchiveEntry]) -> Result<()> {
    w.write_all(&encode(entries)?)?;
    Ok(())
}

pub fn read_from(mut r: impl Read, label: &Path) -> Result<Vec<ArchiveEntry>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes, label)
}
