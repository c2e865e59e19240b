//! The `CIMT` tensor file format.
//!
//! Little-endian layout, no padding:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `CIMT` |
//! | 1 | version, `1` |
//! | 1 | dtype, `0` = f32 |
//! | 1 | ndim |
//! | 1 | reserved, `0` |
//! | 8·ndim | dims as u64 |
//! | 4·Πdims | row-major payload |

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{CimError, Result};

pub const MAGIC: &[u8; 4] = b"CIMT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 8;

/// Serializes a tensor; values are narrowed to `f32`.
pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * t.shape().len() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(DTYPE_F32);
    buf.push(t.shape().len() as u8);
    buf.push(0);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

/// Parses a tensor from bytes. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, message: String| CimError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(fail(4, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(fail(5, format!("unsupported dtype {}", bytes[5])));
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(fail(6, "ndim must be at least 1".into()));
    }
    if bytes[7] != 0 {
        return Err(fail(7, format!("reserved byte is {}, expected 0", bytes[7])));
    }
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(fail(bytes.len(), format!("truncated dimension table, need {dims_end} bytes")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for (i, chunk) in bytes[HEADER_LEN..dims_end].chunks_exact(8).enumerate() {
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        let off = HEADER_LEN + 8 * i;
        if d == 0 {
            return Err(fail(off, format!("dimension {i} is zero")));
        }
        let d = usize::try_from(d).map_err(|_| fail(off, format!("dimension {i} too large")))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| fail(off, "element count overflows".into()))?;
        shape.push(d);
    }
    let payload = numel
        .checked_mul(4)
        .ok_or_else(|| fail(dims_end, "payload size overflows".into()))?;
    let expected = dims_end + payload;
    if bytes.len() < expected {
        return Err(fail(
            bytes.len(),
            format!("truncated payload, expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let data = bytes[dims_end..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| CimError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CimError::io(path, e))?;
    decode(&bytes, path)
}
