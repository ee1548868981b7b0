//! Versioned binary container for named `f64` arrays, with a JSON metadata sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "DYNPARAM"
//! version u32      currently 1
//! count   u32      number of arrays
//! then per array:
//!   name_len u32, name (UTF-8), len u64, len x f64
//! ```
//!
//! The sidecar sits next to the container with a `.json` extension.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DYNPARAM";
pub const VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn encode_arrays(arrays: &[(String, Vec<f64>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, data) in arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_arrays(bytes: &[u8], path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(format_err(path, "truncated container"));
        }
        let (head, rest) = r.split_at(n);
        r = rest;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| format_err(path, "array name is not UTF-8"))?;
        let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(len.checked_mul(8).ok_or_else(|| format_err(path, "array too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, data));
    }
    if !r.is_empty() {
        return Err(format_err(path, "trailing bytes"));
    }
    Ok(out)
}

/// Writes the container and its sidecar.
pub fn save<M: Serialize>(path: &Path, arrays: &[(String, Vec<f64>)], meta: &M) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_arrays(arrays)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(Vec<(String, Vec<f64>)>, M)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let arrays = decode_arrays(&bytes, path)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta = serde_json::from_str(&text).map_err(|e| format_err(&side, e.to_string()))?;
    Ok((arrays, meta))
}

/// Pops the array called `name`, checking its length.
pub(crate) fn take_array(
    arrays: &mut Vec<(String, Vec<f64>)>,
    name: &str,
    len: usize,
    path: &Path,
) -> Result<Vec<f64>> {
    let i = arrays
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| format_err(path, format!("missing array `{name}`")))?;
    let (_, data) = arrays.swap_remove(i);
    if data.len() != len {
        return Err(format_err(
            path,
            format!("array `{name}` has {} values, expected {len}", data.len()),
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(format_err(path, format!("array `{name}` has non-finite values")));
    }
    Ok(data)
}
