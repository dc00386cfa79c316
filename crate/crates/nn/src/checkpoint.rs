//! Versioned binary container shared by every trained artifact.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size         field
//! 0       8            magic  b"EMODCKPT"
//! 8       4            schema version (u32)
//! 12      4            header length H in bytes (u32)
//! 16      H            header, UTF-8 JSON: kind, compat hash, metadata, tensor table
//! 16+H    8 * total    payload: f64 values (IEEE-754, little-endian), tensors in
//!                      header order, each row-major
//! ```
//!
//! The metadata object is free-form per artifact kind (taxonomy, shapes,
//! hyperparameters, vocabulary). Readers reject unknown magic and newer schema
//! versions.

use crate::mat::Mat;
use crate::params::ParamStore;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"EMODCKPT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint schema version {0} (this build reads up to {SCHEMA_VERSION})")]
    Version(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint kind is `{found}`, expected `{expected}`")]
    Kind { expected: String, found: String },
    #[error("checkpoint tensors do not fit the model: {0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    compat: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    /// Tokenizer/vocabulary compatibility hash shared by artifacts that work together.
    pub compat: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, compat: &str, meta: serde_json::Value, store: &ParamStore) -> Self {
        Self {
            kind: kind.to_string(),
            compat: compat.to_string(),
            meta,
            tensors: store.iter().map(|(n, m)| (n.to_string(), m.clone())).collect(),
        }
    }

    /// Copies the payload into `store`, which must have the same tensor layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        for ((name, _), expected) in self.tensors.iter().zip(store.names()) {
            if name != expected {
                return Err(CheckpointError::Shape(format!("tensor `{name}` where `{expected}` was expected")));
            }
        }
        store
            .load_tensors(self.tensors.iter().map(|(_, m)| m.clone()).collect())
            .map_err(CheckpointError::Shape)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Kind { expected: kind.to_string(), found: self.kind.clone() })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            compat: self.compat.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry { name: name.clone(), rows: m.rows(), cols: m.cols() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, m)| m.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated { expected: 16, found: bytes.len() });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version == 0 || version > SCHEMA_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + header_len {
            return Err(CheckpointError::Truncated { expected: 16 + header_len, found: bytes.len() });
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
        let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        let expected = 16 + header_len + 8 * total;
        if bytes.len() != expected {
            return Err(CheckpointError::Truncated { expected, found: bytes.len() });
        }
        let mut offset = 16 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            let data = bytes[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 8 * n;
            tensors.push((entry.name, Mat::from_vec(entry.rows, entry.cols, data)));
        }
        Ok(Self { kind: header.kind, compat: header.compat, meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}
