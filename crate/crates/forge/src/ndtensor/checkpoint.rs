//! Parameter checkpoint container: a JSON header describing named tensors
//! followed by their raw little-endian values.
//!
//! Layout: 8-byte magic `FORGECP1`, u64 LE header length, UTF-8 JSON header,
//! payload. The header records names, shapes, dtype, and byte offsets, plus a
//! free-form `meta` object (model config, training provenance).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FORGECP1";

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    dtype: String,
    tensors: Vec<TensorDesc>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// One named tensor loaded from a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointEntry<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

/// Write named tensors plus a metadata object to `path`.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    entries: &[(String, Vec<usize>, &[S])],
    meta: &serde_json::Value,
) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut descs = Vec::with_capacity(entries.len());
    for (name, shape, data) in entries {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {name}: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        let offset = payload.len() as u64;
        for &v in *data {
            v.write_le(&mut payload);
        }
        descs.push(TensorDesc {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            nbytes: (data.len() * S::WIDTH) as u64,
        });
    }
    let header = Header {
        schema_version: 1,
        dtype: S::DTYPE.to_string(),
        tensors: descs,
        meta: meta.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read all tensors and the metadata object back from `path`.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(Vec<CheckpointEntry<S>>, serde_json::Value)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Validation(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::Validation("checkpoint header truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])?;
    if header.dtype != S::DTYPE {
        return Err(Error::Validation(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            S::DTYPE
        )));
    }
    let payload = &bytes[16 + hlen..];
    let mut entries = Vec::with_capacity(header.tensors.len());
    for d in header.tensors {
        let start = d.offset as usize;
        let end = start + d.nbytes as usize;
        if end > payload.len() {
            return Err(Error::Validation(format!("checkpoint tensor {} truncated", d.name)));
        }
        let data: Vec<S> = payload[start..end].chunks_exact(S::WIDTH).map(S::read_le).collect();
        let n: usize = d.shape.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!(
                "checkpoint tensor {}: shape {:?} vs {} values",
                d.name,
                d.shape,
                data.len()
            )));
        }
        entries.push(CheckpointEntry {
            name: d.name,
            shape: d.shape,
            data,
        });
    }
    Ok((entries, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_values_and_meta() {
        let dir = std::env::temp_dir().join("forge-ckpt-test");
        let path = dir.join("model.ckpt");
        let a = vec![1.0f32, -2.5, 3.25];
        let b = vec![0.5f32; 4];
        let meta = serde_json::json!({"model": "unet5", "base_channels": 16});
        save_checkpoint(
            &path,
            &[
                ("layer.weight".to_string(), vec![3], a.as_slice()),
                ("layer.bias".to_string(), vec![2, 2], b.as_slice()),
            ],
            &meta,
        )
        .unwrap();
        let (entries, meta2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].name, "layer.weight");
        assert_eq!(entries[0].data, a);
        assert_eq!(entries[1].shape, vec![2, 2]);
        assert_eq!(meta2["base_channels"], 16);
        // dtype mismatch is rejected
        assert!(load_checkpoint::<f64>(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
