//! Flat binary parameter file: `"ZIPT"`, version `u32`, record count `u32`,
//! then per record the name (`u32` length + UTF-8), rank `u32`, extents
//! `u32` each and little-endian `f64` values. All integers little-endian.

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Result, ZipError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZIPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            values: t.to_f64_vec(),
        }
    }

    pub fn from_slice<T: Real>(name: impl Into<String>, values: &[T]) -> Self {
        NamedTensor {
            name: name.into(),
            shape: vec![values.len()],
            values: values.iter().map(|v| v.to_f64()).collect(),
        }
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| ZipError::Checkpoint(format!("{what} {v} exceeds u32")))
}

pub fn write_checkpoint<W: Write>(mut w: W, records: &[NamedTensor]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(records.len(), "record count")?.to_le_bytes())?;
    for rec in records {
        let n: usize = rec.shape.iter().product();
        if n != rec.values.len() {
            return Err(ZipError::shape("write_checkpoint", &rec.shape, &[rec.values.len()]));
        }
        let name = rec.name.as_bytes();
        w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&u32_of(rec.shape.len(), "rank")?.to_le_bytes())?;
        for &e in &rec.shape {
            w.write_all(&u32_of(e, "extent")?.to_le_bytes())?;
        }
        for v in &rec.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            ZipError::Checkpoint(format!("truncated at byte {}: {e}", self.offset))
        })?;
        self.offset += n;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor { inner: r, offset: 0 };
    if cur.bytes(4)? != CHECKPOINT_MAGIC {
        return Err(ZipError::Checkpoint("bad magic, expected ZIPT".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(ZipError::UnknownVersion {
            what: "checkpoint",
            version: version as u64,
        });
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.bytes(len)?)
            .map_err(|e| ZipError::Checkpoint(format!("record name is not UTF-8: {e}")))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.bytes(n * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push(NamedTensor { name, shape, values });
    }
    Ok(out)
}
