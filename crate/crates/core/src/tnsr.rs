//! `TNSR` binary interchange format.
//!
//! Layout: magic `TNSR`, u32 version (1), u32 dtype (0 = f32, 1 = f64),
//! u32 ndim, ndim u64 extents, then the row-major payload. All integers and
//! values are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "TNSR",
        msg: msg.into(),
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.ndim() + T::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let s = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| format_err("truncated header"))?;
    *pos += 4;
    Ok(u32::from_le_bytes(s.try_into().unwrap()))
}

/// Decodes one tensor starting at `*pos`, advancing the cursor past it.
/// The stored dtype must match `T`.
pub fn decode_at<T: Real>(bytes: &[u8], pos: &mut usize) -> Result<Tensor<T>> {
    if bytes.get(*pos..*pos + 4) != Some(MAGIC.as_slice()) {
        return Err(format_err("bad magic"));
    }
    *pos += 4;
    let version = read_u32(bytes, pos)?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let dtype = read_u32(bytes, pos)?;
    if dtype != T::DTYPE {
        return Err(format_err(format!("dtype {dtype} stored, {} requested", T::DTYPE)));
    }
    let ndim = read_u32(bytes, pos)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let s = bytes
            .get(*pos..*pos + 8)
            .ok_or_else(|| format_err("truncated extents"))?;
        *pos += 8;
        shape.push(u64::from_le_bytes(s.try_into().unwrap()) as usize);
    }
    let n = numel(&shape);
    let payload = bytes
        .get(*pos..*pos + n * T::BYTES)
        .ok_or_else(|| format_err("truncated payload"))?;
    *pos += n * T::BYTES;
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut pos = 0;
    let t = decode_at(bytes, &mut pos)?;
    if pos != bytes.len() {
        return Err(format_err("trailing bytes"));
    }
    Ok(t)
}

pub fn save<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    if let Some(dir) = path.as_ref().parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        let mut want = b"TNSR".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&0u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let t = Tensor::<f32>::zeros(vec![3]);
        assert!(decode::<f64>(&encode(&t)).is_err());
    }

    #[test]
    fn truncation_rejected() {
        let t = Tensor::<f64>::ones(vec![2, 2]);
        let b = encode(&t);
        assert!(decode::<f64>(&b[..b.len() - 1]).is_err());
        assert!(decode::<f64>(b"TNSX").is_err());
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::<f64>::scalar(3.5);
        assert_eq!(decode::<f64>(&encode(&t)).unwrap(), t);
    }
}
