//! EPTN tensor container.
//!
//! Layout, all integers little-endian: the 4-byte magic `EPTN`, a `u16`
//! version (1), a `u8` element type (0 = f32, 1 = f64, 2 = u8), a `u8`
//! rank, `rank` `u64` extents, then the row-major payload.

use std::path::Path;

use epimisr_core::{DType, Scalar, Tensor};

use crate::error::{Error, Result};
use crate::fsutil::{read, write_atomic};

pub const MAGIC: &[u8; 4] = b"EPTN";
pub const VERSION: u16 = 1;
const U8_CODE: u8 = 2;

/// A decoded container of any element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }
}

fn header(code: u8, shape: &[usize], payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * shape.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(code);
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let size = T::DTYPE.size();
    let mut out = header(T::DTYPE.code(), t.shape(), t.len() * size);
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
    out
}

pub fn encode_u8(t: &Tensor<u8>) -> Vec<u8> {
    let mut out = header(U8_CODE, t.shape(), t.len());
    out.extend_from_slice(t.data());
    out
}

/// `true` as 1, `false` as 0.
pub fn encode_mask(t: &Tensor<bool>) -> Vec<u8> {
    let bytes: Vec<u8> = t.data().iter().map(|&b| b as u8).collect();
    encode_u8(&Tensor::new(t.shape(), bytes).expect("same extents"))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("not an EPTN container (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported EPTN version {version}")));
    }
    let code = bytes[6];
    let rank = bytes[7] as usize;
    let dims_end = 8 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| bad("extents overflow".into()))?;
    let size = match code {
        U8_CODE => 1,
        c => DType::from_code(c)
            .ok_or_else(|| bad(format!("unknown element type {c}")))?
            .size(),
    };
    let payload = &bytes[dims_end..];
    if payload.len() != count * size {
        return Err(bad(format!(
            "payload has {} bytes, {:?} needs {}",
            payload.len(),
            shape,
            count * size
        )));
    }
    let core = |e: epimisr_core::Error| bad(e.to_string());
    Ok(match code {
        0 => AnyTensor::F32(
            Tensor::new(
                &shape,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
            .map_err(core)?,
        ),
        1 => AnyTensor::F64(
            Tensor::new(
                &shape,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )
            .map_err(core)?,
        ),
        _ => AnyTensor::U8(Tensor::new(&shape, payload.to_vec()).map_err(core)?),
    })
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn write_mask(path: &Path, t: &Tensor<bool>) -> Result<()> {
    write_atomic(path, &encode_mask(t))
}

pub fn read_any(path: &Path) -> Result<AnyTensor> {
    decode(&read(path)?, path)
}

/// Reads a float container and converts it to `T`.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    match read_any(path)? {
        AnyTensor::F32(t) => Ok(t.cast()),
        AnyTensor::F64(t) => Ok(t.cast()),
        AnyTensor::U8(_) => Err(Error::format(path, "expected floating point data, found u8")),
    }
}
