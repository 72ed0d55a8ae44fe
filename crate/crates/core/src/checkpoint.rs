//! Checkpoint container: named tensors as little-endian raw values with a
//! JSON index, behind the versioned magic header `BEAMTAS-CKPT-1`.
//!
//! The metadata slot carries the model architecture so a checkpoint is
//! self-describing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::diffnet::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"BEAMTAS-CKPT-1\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the data blob.
    offset: u64,
    /// Number of elements.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    metadata: &serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, value) in params.iter() {
        let len = value.len() as u64;
        entries.push(TensorEntry {
            name: name.to_string(),
            dtype: "f64".to_string(),
            shape: value.shape().to_vec(),
            offset,
            len,
        });
        offset += len * 8;
    }
    let index = Index {
        metadata: metadata.clone(),
        tensors: entries,
    };
    let index_bytes = serde_json::to_vec(&index)?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(index_bytes.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&index_bytes).map_err(io)?;
    for (_, value) in params.iter() {
        for v in value.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 15];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(Error::CheckpointFormat("bad magic header".into()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io)?;
    let index_len = u64::from_le_bytes(len_bytes) as usize;
    let mut index_bytes = vec![0u8; index_len];
    r.read_exact(&mut index_bytes).map_err(io)?;
    let index: Index = serde_json::from_slice(&index_bytes)?;

    let mut blob = Vec::new();
    r.read_to_end(&mut blob).map_err(io)?;

    let mut params = ParamSet::new();
    for entry in &index.tensors {
        if entry.dtype != "f64" {
            return Err(Error::CheckpointFormat(format!(
                "unsupported dtype '{}' for tensor '{}'",
                entry.dtype, entry.name
            )));
        }
        let start = entry.offset as usize;
        let nbytes = entry.len as usize * 8;
        if start + nbytes > blob.len() {
            return Err(Error::CheckpointFormat(format!(
                "tensor '{}' extends past end of data blob",
                entry.name
            )));
        }
        let values: Vec<f64> = blob[start..start + nbytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::CheckpointFormat(format!("tensor '{}': {e}", entry.name)))?;
        params.insert(&entry.name, arr);
    }
    Ok((params, index.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut params = ParamSet::new();
        params.insert("enc.w", ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| (ix[0] * 3 + ix[1]) as f64 * 0.25));
        params.insert("dec.w", ArrayD::from_elem(IxDyn(&[4]), -1.5));
        let meta = serde_json::json!({"arch": {"enc_filters": 64}});
        save_checkpoint(&path, &params, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(loaded.get("enc.w"), params.get("enc.w"));
        assert_eq!(loaded.get("dec.w"), params.get("dec.w"));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOT-A-CHECKPOINT").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointFormat(_))
        ));
    }
}
