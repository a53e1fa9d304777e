//! Little-endian framing shared by the tensor and checkpoint files.

use crate::error::{Error, Result};

pub(crate) const DTYPE_U8: u8 = 0;
pub(crate) const DTYPE_F64: u8 = 1;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Integrity(format!(
                "{} is truncated: needed {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A `u64` length that must fit in the remaining bytes at `unit` bytes each.
    pub fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        match usize::try_from(n).ok().and_then(|n| n.checked_mul(unit.max(1))) {
            Some(bytes) if bytes <= self.remaining() => Ok(n as usize),
            _ => Err(Error::Integrity(format!("{} is truncated: length {n} exceeds the data left", self.what))),
        }
    }
}

/// Shape header: rank as `u32`, then every dimension as `u64`.
pub(crate) fn put_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

pub(crate) fn get_shape(r: &mut Reader<'_>) -> Result<Vec<usize>> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor rank {rank} is implausible")));
    }
    (0..rank).map(|_| r.u64().map(|d| d as usize)).collect()
}

pub(crate) fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} overflows")))
}
