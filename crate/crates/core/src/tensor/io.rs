//! Tensor binary records.
//!
//! Layout (all integers little-endian): magic `RATT`, version `u32 = 1`,
//! `ndim: u32`, `ndim` dimensions as `u64`, dtype code `u8` (1 = f32,
//! 2 = f64), then the row-major element data.

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"RATT";
pub const TENSOR_VERSION: u32 = 1;

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 8 * t.ndim() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(T::DTYPE as u8);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(&encode_tensor(t))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated tensor record while reading {what}: {e}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads one record. Stored f32/f64 data is converted to `T`; same-dtype
/// reads are bit-exact.
pub fn read_tensor<T: Real, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor version {version}"
        )));
    }
    let ndim = read_u32(r, "ndim")? as usize;
    if ndim == 0 || ndim > 16 {
        return Err(Error::Format(format!("implausible tensor rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r, "dims")? as usize);
    }
    let mut code = [0u8; 1];
    read_exact(r, &mut code, "dtype")?;
    let dtype = DType::from_code(code[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", code[0])))?;
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n < (1 << 34))
        .ok_or_else(|| Error::Format(format!("implausible tensor shape {shape:?}")))?;
    let mut raw = vec![0u8; numel * dtype.size()];
    read_exact(r, &mut raw, "data")?;
    let data: Vec<T> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut bytes.as_slice())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
