//! `.cst` tensor container.
//!
//! ```text
//! "CST1" | dtype: u8 (0 = f32) | ndim: u8 | ndim × u32 LE extents | f32 LE payload
//! ```

use std::path::Path;

use cstn_core::Tensor;

use crate::error::{self, Error, Result};

pub const MAGIC: &[u8; 4] = b"CST1";
pub const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + 4 * t.numel());
    encode_into(t, &mut out);
    out
}

pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one tensor from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize), String> {
    if bytes.len() < 6 {
        return Err("truncated header".into());
    }
    if &bytes[..4] != MAGIC {
        return Err(format!("bad magic {:?}", &bytes[..4]));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(format!("unsupported dtype code {}", bytes[4]));
    }
    let ndim = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let chunk = bytes.get(pos..pos + 4).ok_or("truncated extents")?;
        shape.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
        pos += 4;
    }
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("extent overflow")?;
    let len = numel.checked_mul(4).ok_or("extent overflow")?;
    let payload = bytes.get(pos..pos + len).ok_or_else(|| format!("truncated payload: need {len} bytes"))?;
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let t = Tensor::new(&shape, data).map_err(|e| e.to_string())?;
    Ok((t, pos + len))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor, String> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - used));
    }
    Ok(t)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    error::write(path, &encode(t))
}

pub fn load(path: &Path) -> Result<Tensor> {
    decode(&error::read(path)?).map_err(|r| Error::format(path, r))
}
