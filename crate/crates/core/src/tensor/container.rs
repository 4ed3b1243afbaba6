//! Flat binary tensor container.
//!
//! ```text
//! "GSCN" | version: u32 | dtype: u32 (0 = f32, 1 = f64) | n, h, w, c: u64 | values
//! ```
//! All integers and values are little-endian.

use std::fs;
use std::path::Path;

use super::{DType, Real, Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GSCN";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 * 8;

pub fn encode_tensor<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.tag().to_le_bytes());
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes one tensor from the front of `bytes`, converting to `T` if the
/// stored dtype differs. Returns the tensor and the number of bytes used.
pub fn decode_tensor<T: Real>(bytes: &[u8]) -> std::result::Result<(Tensor<T>, usize), String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic, not a GSCN tensor".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(format!("unsupported container version {version}"));
    }
    let dtype = DType::from_tag(u32_at(8)).ok_or_else(|| format!("unknown dtype tag {}", u32_at(8)))?;
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 12 + 8 * i;
        let v = u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        *d = usize::try_from(v).map_err(|_| format!("dimension {v} too large"))?;
    }
    let shape = Shape::from(dims);
    let count = dims
        .iter()
        .try_fold(1usize, |a, d| a.checked_mul(*d))
        .ok_or("shape overflows")?;
    let body = count.checked_mul(dtype.size()).ok_or("shape overflows")?;
    let end = HEADER_LEN + body;
    if bytes.len() < end {
        return Err(format!("truncated body: {} of {body} bytes", bytes.len() - HEADER_LEN));
    }
    let raw = &bytes[HEADER_LEN..end];
    let data: Vec<T> = match dtype {
        DType::F32 => raw.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((t, end))
}

pub fn write_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes).map_err(|d| Error::format(path, d))?;
    if used != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}
