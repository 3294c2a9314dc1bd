//! Parameter checkpoints: an index header followed by one `TNSR` blob per
//! parameter.
//!
//! Layout (little-endian): magic `STCK`, u32 version (1), u32 metadata length
//! then UTF-8 `key = value` metadata, u32 parameter count, then per parameter
//! u32 name length, UTF-8 name and a u8 frozen flag. The tensors follow in
//! index order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::scalar::Real;
use crate::tnsr;

pub const MAGIC: &[u8; 4] = b"STCK";
pub const VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let s = bytes.get(*pos..*pos + n).ok_or_else(|| format_err("truncated index"))?;
    *pos += n;
    Ok(s)
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

fn take_str(bytes: &[u8], pos: &mut usize) -> Result<String> {
    let n = take_u32(bytes, pos)? as usize;
    String::from_utf8(take(bytes, pos, n)?.to_vec()).map_err(|_| format_err("name is not UTF-8"))
}

pub fn encode<T: Real>(meta: &str, store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, meta);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        put_str(&mut out, store.name(id));
        out.push(u8::from(store.is_frozen(id)));
    }
    for (_, t) in store.iter() {
        out.extend_from_slice(&tnsr::encode(t));
    }
    out
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(String, ParamStore<T>)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = take_u32(bytes, &mut pos)?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let meta = take_str(bytes, &mut pos)?;
    let n = take_u32(bytes, &mut pos)? as usize;
    let mut index = Vec::with_capacity(n);
    for _ in 0..n {
        let name = take_str(bytes, &mut pos)?;
        let frozen = take(bytes, &mut pos, 1)?[0] != 0;
        index.push((name, frozen));
    }
    let mut store = ParamStore::new();
    for (name, frozen) in index {
        let t = tnsr::decode_at(bytes, &mut pos)?;
        let id = store.add(name, t);
        if frozen {
            store.freeze(id);
        }
    }
    if pos != bytes.len() {
        return Err(format_err("trailing bytes"));
    }
    Ok((meta, store))
}

pub fn save<T: Real>(path: &Path, meta: &str, store: &ParamStore<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(meta, store))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(String, ParamStore<T>)> {
    decode(&fs::read(path)?)
}

/// Value of `key` in `key = value` metadata.
pub fn meta_value<'a>(meta: &'a str, key: &str) -> Option<&'a str> {
    meta.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn round_trip_keeps_names_values_and_flags() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.5));
        let b = s.add("b", Tensor::scalar(-1.25));
        s.freeze(b);
        let bytes = encode("kind = test\nscale = 4\n", &s);
        let (meta, back) = decode::<f32>(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(meta_value(&meta, "scale"), Some("4"));
        assert!(decode::<f64>(&bytes).is_err());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
