//! STDF binary tensor files.
//!
//! Layout: magic `STDF`, format version (u16), dtype tag (u8, 1 = f32,
//! 2 = f64), rank (u8), extents as u64 values, then the row-major
//! payload. All integers and values are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"STDF";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decode a tensor, converting from the stored dtype to `T` if they differ.
pub fn decode<T: Real>(bytes: &[u8], file: &str) -> Result<Tensor<T>> {
    let bad = |field: &str| Error::Integrity {
        file: file.to_string(),
        field: field.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(bad("format version"));
    }
    let dtype = DType::from_tag(bytes[6]).ok_or_else(|| bad("dtype tag"))?;
    let rank = bytes[7] as usize;
    let header = 8 + 8 * rank;
    if rank == 0 || bytes.len() < header {
        return Err(bad("extents"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let at = 8 + 8 * i;
            u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
        })
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| if e == 0 { None } else { acc.checked_mul(e) })
        .ok_or_else(|| bad("extents"))?;
    let payload = &bytes[header..];
    if payload.len() != count * dtype.size() {
        return Err(bad("payload length"));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::c(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::c(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(&shape, data)
}

pub fn write<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
