//! Single-tensor files used for corpus splits.
//!
//! Layout (little-endian): magic `CLTENSOR`, `u32` version, `u8` dtype
//! (0 = `u8` pixels scaled by 1/255, 1 = `f64`), `u32` rank, `u64` per
//! dimension, the payload, then a CRC-32 of the payload.

use std::path::Path;

use clipladder_core::tensor::Tensor;

use crate::binary::{element_count, get_shape, put_shape, Reader, DTYPE_F64, DTYPE_U8};
use crate::error::{read_file, write_file, Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"CLTENSOR";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    /// Values in `[0, 1]` stored as `round(255·v)`.
    U8,
    F64,
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32 + t.numel() * 8);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    let payload: Vec<u8> = match dtype {
        DType::U8 => {
            out.push(DTYPE_U8);
            t.data()
                .iter()
                .map(|&v| {
                    if (0.0..=1.0).contains(&v) {
                        Ok((v * 255.0).round() as u8)
                    } else {
                        Err(Error::Core(clipladder_core::Error::Input(format!("pixel value {v} outside [0, 1]"))))
                    }
                })
                .collect::<Result<_>>()?
        }
        DType::F64 => {
            out.push(DTYPE_F64);
            t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
        }
    };
    put_shape(&mut out, t.shape());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "tensor file");
    if r.take(8).ok() != Some(TENSOR_MAGIC.as_slice()) {
        return Err(Error::Format("not a tensor file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("tensor file version {version} is not supported (reader version {TENSOR_VERSION})")));
    }
    let dtype = r.u8()?;
    let shape = get_shape(&mut r)?;
    let n = element_count(&shape)?;
    let data: Vec<f64> = match dtype {
        DTYPE_U8 => {
            let payload = r.take(n)?;
            check_crc(&mut r, payload)?;
            payload.iter().map(|&b| b as f64 / 255.0).collect()
        }
        DTYPE_F64 => {
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            check_crc(&mut r, payload)?;
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
        }
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after tensor", r.remaining())));
    }
    Ok(Tensor::new(shape, data)?)
}

fn check_crc(r: &mut Reader<'_>, payload: &[u8]) -> Result<()> {
    let stored = r.u32()?;
    if stored != crc32fast::hash(payload) {
        return Err(Error::Integrity("tensor payload checksum mismatch".into()));
    }
    Ok(())
}

pub fn write_tensor_file(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    write_file(path, encode_tensor(t, dtype)?)
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}
