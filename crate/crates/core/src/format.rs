//! Binary container shared by dataset (`MMFZ1`) and checkpoint (`MMCK1`)
//! files.
//!
//! ```text
//! offset  size  field
//! 0       5     magic, ASCII
//! 5       4     format version, u32 LE
//! 9       8     header length H in bytes, u64 LE
//! 17      H     header, UTF-8 JSON
//! 17+H    ...   payload, file-type specific, all integers and floats LE
//! ```
//!
//! Tensors in a payload are written as `rank: u32`, `rank x extent: u32`,
//! then `product(extents) x f64`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 5], header: &serde_json::Value) -> Result<Self> {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let h = serde_json::to_vec(header)?;
        buf.extend_from_slice(&(h.len() as u64).to_le_bytes());
        buf.extend_from_slice(&h);
        Ok(Self { buf })
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.f64s(t.data());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.buf)?;
        Ok(())
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic and version, returns the reader positioned at the
    /// payload together with the parsed header.
    pub fn open(bytes: &'a [u8], magic: &[u8; 5]) -> Result<(Self, serde_json::Value)> {
        let mut r = Self { bytes, pos: 0 };
        let m = r.take(5)?;
        if m != magic {
            return Err(Error::Parse {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = r.u64()? as usize;
        let at = r.pos;
        let h = r.take(len)?;
        let header = serde_json::from_slice(h).map_err(|e| Error::Parse {
            offset: at as u64,
            message: format!("invalid header: {e}"),
        })?;
        Ok((r, header))
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!(
                "unexpected end of file: needed {n} bytes, {} left",
                self.bytes.len() - self.pos
            ))),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.error("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos as u64;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Parse {
                offset: at,
                message: format!("implausible tensor rank {rank}"),
            });
        }
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Parse {
                offset: at,
                message: format!("invalid tensor shape {shape:?}"),
            })?;
        let data = self.f64s(n)?;
        Tensor::new(shape, data).map_err(|e| Error::Parse {
            offset: at,
            message: e.to_string(),
        })
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
