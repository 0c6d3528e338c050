//! `.ten` binary tensor files.
//!
//! Layout: magic `TEN1`, `u8` dtype code (0 = f64, 1 = f32), `u8` rank,
//! `rank` little-endian `u32` dimensions, then the row-major little-endian
//! payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, IoContext, Result};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"TEN1";

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + t.len() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE_CODE);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.to_bytes());
    out
}

pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let fmt = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 6 {
        return Err(truncated(6));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    if bytes[4] != T::DTYPE_CODE {
        return Err(fmt(&format!("dtype code {} does not match requested {}", bytes[4], T::DTYPE_CODE)));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let width = std::mem::size_of::<T>();
    let n: usize = shape.iter().product();
    let expected = header + n * width;
    if bytes.len() != expected {
        return Err(truncated(expected));
    }
    let data = bytes[header..].chunks_exact(width).map(T::from_le_slice).collect();
    Tensor::new(shape, data)
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).at(path)
}

pub fn read<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).at(path)?;
    decode(&bytes, path)
}
