//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MOSST\0" | u8 dtype (0 = f32, 1 = f64) | u8 rank | rank x u32 extents | values
//! ```

use std::fs;
use std::path::Path;

use super::{check_shape, Tensor};
use crate::error::{Error, Result};
use crate::real::{DType, Real};

pub const MAGIC: &[u8; 6] = b"MOSST\0";

impl<T: Real> Tensor<T> {
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(T::DTYPE.tag());
        out.push(self.rank() as u8);
        for &n in self.shape() {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        out.reserve(self.len() * T::DTYPE.size());
        for &x in self.data() {
            x.write_le(out);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_bytes(&mut out);
        out
    }

    /// Parses one container from the front of `bytes`, returning the tensor
    /// and the number of bytes consumed. Stored values of the other dtype are
    /// converted to `T`.
    pub fn read_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader::new(bytes);
        if r.take(6)? != MAGIC {
            return Err(fmt("bad magic"));
        }
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| fmt("unknown dtype tag"))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        check_shape(&shape).map_err(|e| fmt(&e.to_string()))?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        Ok((Tensor::new(&shape, data)?, r.pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::read_bytes(bytes)?;
        if used != bytes.len() {
            return Err(fmt("trailing bytes after tensor"));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn fmt(reason: &str) -> Error {
    Error::Format {
        what: "tensor container",
        reason: reason.to_string(),
    }
}

/// Bounds-checked cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(fmt("unexpected end of data")),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}
