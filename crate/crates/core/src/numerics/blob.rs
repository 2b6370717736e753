//! Tensor blob encoding: a JSON table of `{name, shape, dtype, offset}`
//! entries describing little-endian `f64` values in a contiguous blob.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (entries, blob)
}

pub fn decode_tensors(entries: &[TensorEntry], blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    entries
        .iter()
        .map(|e| {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(n * 8).filter(|&end| end <= blob.len()).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "tensor {} ({} values at byte {}) runs past the end of a {}-byte blob",
                    e.name,
                    n,
                    e.offset,
                    blob.len()
                ))
            })?;
            let data = blob[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect()
}
