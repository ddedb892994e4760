//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! DAGNAT-CHECKPOINT 1\n
//! {"config": {...}, "tensors": [{"name": ..., "rows": r, "cols": c}, ...], "extra": {...}}\n
//! <r*c little-endian f64 values per tensor, in header order>
//! ```
//!
//! `extra` is free-form metadata (vocabulary, training settings). Values are
//! stored as raw bits, so a save/load round trip is exact.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{TinyModel, TinyModelConfig};
use super::tape::ParamStore;
use super::tensor::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &str = "DAGNAT-CHECKPOINT 1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TinyModelConfig,
    tensors: Vec<TensorInfo>,
    #[serde(default)]
    extra: serde_json::Map<String, serde_json::Value>,
}

pub fn to_bytes(model: &TinyModel, extra: &serde_json::Map<String, serde_json::Value>) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        tensors: model
            .params
            .iter()
            .map(|(name, m)| TensorInfo {
                name: name.to_string(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
        extra: extra.clone(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    for (_, m) in model.params.iter() {
        for v in &m.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn split_line(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(TinyModel, serde_json::Map<String, serde_json::Value>)> {
    let (magic, rest) = split_line(bytes)?;
    if magic != MAGIC.as_bytes() {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic line)".into()));
    }
    let (header, mut body) = split_line(rest)?;
    let header: Header = serde_json::from_slice(header)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut params = ParamStore::new();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        if body.len() < n * 8 {
            return Err(Error::Checkpoint(format!("tensor {} is truncated", t.name)));
        }
        let data = body[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        body = &body[n * 8..];
        params.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, data));
    }
    if !body.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len())));
    }
    Ok((TinyModel::from_params(header.config, params)?, header.extra))
}

pub fn save(
    path: impl AsRef<Path>,
    model: &TinyModel,
    extra: &serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model, extra)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(TinyModel, serde_json::Map<String, serde_json::Value>)> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
