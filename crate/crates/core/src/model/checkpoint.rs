//! Checkpoint files:
//!
//! ```text
//! magic "LAYOUTCK" | u32 LE format version | u64 LE header length
//! | header JSON {config, metadata, tensors: [{name, shape, dtype, offset}]}
//! | tensor blob (little-endian f64)
//! ```
//!
//! Model tensors come first in config order; any further entries (optimizer
//! moments, classifier heads) are carried as `extra`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::layout::LayoutSchema;
use crate::numerics::blob::{decode_tensors, encode_tensors, TensorEntry};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LAYOUTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub params: ModelParams,
    pub extra: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

impl CheckpointFile {
    pub fn new(params: ModelParams) -> Self {
        CheckpointFile {
            params,
            extra: Vec::new(),
            metadata: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let all = self
            .params
            .named()
            .chain(self.extra.iter().map(|(n, t)| (n.as_str(), t)));
        let (entries, blob) = encode_tensors(all);
        let header = serde_json::to_vec(&Header {
            config: self.params.config().clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::Checkpoint("file is truncated".into());
        if bytes.len() < 20 {
            return Err(truncated());
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(truncated)?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        let blob = &bytes[header_end..];
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum();
        if blob.len() != expected {
            return Err(Error::Checkpoint(format!(
                "tensor blob holds {} bytes but the header describes {expected}",
                blob.len()
            )));
        }
        let mut named = decode_tensors(&header.tensors, blob)?;
        let n_model = header.config.tensor_shapes().len();
        if named.len() < n_model {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, the model config needs {n_model}",
                named.len()
            )));
        }
        let extra = named.split_off(n_model);
        let params = ModelParams::from_named(header.config, named)?;
        Ok(CheckpointFile {
            params,
            extra,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that the model fits `schema`'s vocabulary and length.
    pub fn load_for_schema(path: impl AsRef<Path>, schema: &LayoutSchema) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.params
            .check_schema(schema)
            .map_err(|e| Error::Checkpoint(format!("checkpoint does not match the schema: {e}")))?;
        Ok(ck)
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    CheckpointFile::new(params.clone()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig)> {
    let ck = CheckpointFile::load(path)?;
    let config = ck.params.config().clone();
    Ok((ck.params, config))
}
