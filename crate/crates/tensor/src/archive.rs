//! Checkpoint container: a flat list of named arrays.
//!
//! Layout (all integers little-endian):
//!   magic "HQVA" | version u32 | count u32
//!   then per entry:
//!     name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32 x ndim | payload
//!
//! Writes are byte-deterministic for a given entry list, which is what lets
//! resume tests compare whole files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: [u8; 4] = *b"HQVA";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
            Payload::I64(_) => Dtype::I64,
            Payload::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::I64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl ArchiveEntry {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let payload = match T::DTYPE {
            Dtype::F32 => Payload::F32(t.data().iter().map(|x| x.to_f64() as f32).collect()),
            Dtype::F64 => Payload::F64(t.data().iter().map(|x| x.to_f64()).collect()),
            _ => unreachable!("scalar types are floats"),
        };
        ArchiveEntry { name: name.to_string(), dims: t.dims().to_vec(), payload }
    }

    /// Strict dtype round-trip: an f32 checkpoint only loads into an f32 model.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.payload.dtype() != T::DTYPE {
            return Err(Error::Archive {
                detail: format!(
                    "entry {:?} holds {:?}, requested {:?}",
                    self.name,
                    self.payload.dtype(),
                    T::DTYPE
                ),
            });
        }
        let data: Vec<T> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            _ => unreachable!(),
        };
        Tensor::from_vec(&self.dims, data)
    }

    pub fn scalar_f64(name: &str, v: f64) -> Self {
        ArchiveEntry { name: name.to_string(), dims: vec![1], payload: Payload::F64(vec![v]) }
    }

    pub fn i64s(name: &str, v: Vec<i64>) -> Self {
        let dims = vec![v.len()];
        ArchiveEntry { name: name.to_string(), dims, payload: Payload::I64(v) }
    }

    pub fn bytes(name: &str, v: Vec<u8>) -> Self {
        let dims = vec![v.len()];
        ArchiveEntry { name: name.to_string(), dims, payload: Payload::U8(v) }
    }

    pub fn as_f64(&self) -> Result<f64> {
        match &self.payload {
            Payload::F64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(Error::Archive { detail: format!("entry {:?} is not a scalar f64", self.name) }),
        }
    }

    pub fn as_i64s(&self) -> Result<&[i64]> {
        match &self.payload {
            Payload::I64(v) => Ok(v),
            _ => Err(Error::Archive { detail: format!("entry {:?} is not i64 data", self.name) }),
        }
    }

    pub fn as_bytes(&self) -> Result<&[u8]> {
        match &self.payload {
            Payload::U8(v) => Ok(v),
            _ => Err(Error::Archive { detail: format!("entry {:?} is not byte data", self.name) }),
        }
    }
}

pub fn write_archive_file(path: &Path, entries: &[ArchiveEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_archive(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn write_archive<W: Write>(mut w: W, entries: &[ArchiveEntry]) -> Result<()> {
    w.write_all(&ARCHIVE_MAGIC)?;
    w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Archive { detail: format!("entry name too long: {:?}", e.name) });
        }
        let elems: usize = e.dims.iter().product();
        if elems != e.payload.len() {
            return Err(Error::Archive {
                detail: format!("entry {:?}: dims {:?} vs {} elements", e.name, e.dims, e.payload.len()),
            });
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.payload.dtype().code(), e.dims.len() as u8])?;
        for &d in &e.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match &e.payload {
            Payload::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Payload::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Payload::I64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Payload::U8(v) => w.write_all(v)?,
        }
    }
    Ok(())
}

struct Cursor<R> {
    r: R,
    off: usize,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r.read_exact(&mut buf).map_err(|_| Error::Archive {
            detail: format!("truncated at byte {} (wanted {} more)", self.off, n),
        })?;
        self.off += n;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_archive_file(path: &Path) -> Result<Vec<ArchiveEntry>> {
    read_archive(BufReader::new(File::open(path)?))
}

pub fn read_archive<R: Read>(r: R) -> Result<Vec<ArchiveEntry>> {
    let mut c = Cursor { r, off: 0 };
    let magic = c.take(4)?;
    if magic != ARCHIVE_MAGIC {
        return Err(Error::Archive { detail: "bad magic bytes (not a checkpoint archive)".into() });
    }
    let version = c.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::ArchiveVersion { found: version, supported: ARCHIVE_VERSION });
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name_at = c.off;
        let name = String::from_utf8(c.take(name_len)?).map_err(|_| Error::Archive {
            detail: format!("entry name at byte {name_at} is not utf-8"),
        })?;
        let meta = c.take(2)?;
        let dtype = Dtype::from_code(meta[0]).ok_or_else(|| Error::Archive {
            detail: format!("entry {:?}: unknown dtype code {}", name, meta[0]),
        })?;
        let ndim = meta[1] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32()? as usize);
        }
        let elems: usize = dims.iter().product();
        let raw = c.take(elems * dtype.size())?;
        let payload = match dtype {
            Dtype::F32 => Payload::F32(
                raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
            ),
            Dtype::F64 => Payload::F64(
                raw.chunks_exact(8)
                    .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                    .collect(),
            ),
            Dtype::I64 => Payload::I64(
                raw.chunks_exact(8)
                    .map(|b| i64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                    .collect(),
            ),
            Dtype::U8 => Payload::U8(raw),
        };
        entries.push(ArchiveEntry { name, dims, payload });
    }
    // trailing garbage means the file is not what we wrote
    let mut probe = [0u8; 1];
    if c.r.read(&mut probe)? != 0 {
        return Err(Error::Archive { detail: format!("trailing bytes after entry {count}") });
    }
    Ok(entries)
}
