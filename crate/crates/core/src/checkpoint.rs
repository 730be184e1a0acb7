//! Single-file parameter checkpoints.
//!
//! Layout: magic `CTEE`, little-endian `u32` version, `u64` header length,
//! a JSON header (`meta` plus tensor table), then raw little-endian `f64`
//! tensor data in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CTEE";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(meta: &serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        tensors: store
            .named()
            .map(|(name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let n_values: usize = store.named().map(|(_, m)| m.data().len()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in store.named() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let corrupt = |message: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| corrupt(&format!("header: {e}")))?;
    let mut offset = data_start;
    let mut store = ParamStore::new();
    for t in header.tensors {
        let n = t.rows * t.cols;
        let end = offset + 8 * n;
        if end > bytes.len() {
            return Err(corrupt(&format!("tensor {} truncated", t.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(t.name, Matrix::from_vec(t.rows, t.cols, data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((header.meta, store))
}

pub fn save(path: &Path, meta: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let bytes = to_bytes(meta, store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_exact(values in proptest::collection::vec(proptest::num::f64::ANY, 1..40), cols in 1usize..5) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let mut store = ParamStore::new();
            store.add("a", Matrix::from_vec(rows, cols, values[..rows * cols].to_vec()).unwrap());
            store.add("b", Matrix::zeros(0, 3));
            let meta = serde_json::json!({"kind": "test", "n": rows});
            let bytes = to_bytes(&meta, &store).unwrap();
            let (meta2, back) = from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(meta2, meta);
            let a0 = store.get(crate::autograd::ParamId(0)).data();
            let a1 = back.get(crate::autograd::ParamId(0)).data();
            prop_assert_eq!(a0.len(), a1.len());
            for (x, y) in a0.iter().zip(a1) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(back.name(crate::autograd::ParamId(1)), "b");
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::filled(2, 2, 1.5));
        let bytes = to_bytes(&serde_json::json!({}), &store).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
        assert!(from_bytes(b"nope", Path::new("x")).is_err());
    }
}
