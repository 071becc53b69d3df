//! `*.ovec` vector store files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OVEC"            4 bytes magic
//! version  u32      currently 1
//! dim      u32
//! count    u64
//! payload  count × dim × f32
//! mlen     u64      manifest length in bytes
//! manifest mlen     NDJSON, one {"row":i,"id":"..."} line per row
//! ```

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EmbeddingVector, EMBEDDING_DIM};

pub const STORE_MAGIC: &[u8; 4] = b"OVEC";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic {0:?}, expected \"OVEC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported store version {0}")]
    UnsupportedVersion(u32),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("count mismatch: header says {header}, manifest has {manifest}")]
    CountMismatch { header: usize, manifest: usize },
    #[error("truncated payload: needed {needed} bytes, file has {available}")]
    TruncatedPayload { needed: usize, available: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{0} trailing bytes after manifest")]
    TrailingBytes(usize),
    #[error("invalid store: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    row: usize,
    id: String,
}

/// Row-major matrix of vectors plus a row-aligned id manifest. Immutable once
/// constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl VectorStore {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::Invalid("dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(StoreError::Invalid(format!(
                "{} floats cannot hold {} rows of dimension {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if id.is_empty() {
                return Err(StoreError::Invalid("empty record id".into()));
            }
            if !seen.insert(id.as_str()) {
                return Err(StoreError::Invalid(format!("duplicate record id {id:?}")));
            }
        }
        Ok(Self { dim, ids, data })
    }

    pub fn from_vectors<I>(rows: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = (String, EmbeddingVector)>,
    {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, v) in rows {
            ids.push(id);
            data.extend_from_slice(v.as_slice());
        }
        Self::new(EMBEDDING_DIM, ids, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for (row, id) in self.ids.iter().enumerate() {
            let line = serde_json::to_string(&ManifestLine { row, id: id.clone() }).expect("manifest line serializes");
            manifest.push_str(&line);
            manifest.push('\n');
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + 8 + manifest.len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out
    }

    /// Parses a store, requiring dimension `expected_dim`.
    pub fn from_bytes(bytes: &[u8], expected_dim: usize) -> Result<Self, StoreError> {
        if bytes.len() < HEADER_LEN {
            return Err(StoreError::TruncatedPayload {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != STORE_MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim != expected_dim {
            return Err(StoreError::DimensionMismatch {
                expected: expected_dim,
                found: dim,
            });
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_len = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| StoreError::Invalid(format!("count {count} overflows")))?;
        let payload_end = HEADER_LEN + payload_len;
        let needed = payload_end + 8;
        if bytes.len() < needed {
            return Err(StoreError::TruncatedPayload {
                needed,
                available: bytes.len(),
            });
        }
        let data: Vec<f32> = bytes[HEADER_LEN..payload_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mlen = u64::from_le_bytes(bytes[payload_end..needed].try_into().unwrap()) as usize;
        let manifest_end = needed
            .checked_add(mlen)
            .ok_or_else(|| StoreError::Manifest("length overflows".into()))?;
        if bytes.len() < manifest_end {
            return Err(StoreError::TruncatedPayload {
                needed: manifest_end,
                available: bytes.len(),
            });
        }
        if bytes.len() > manifest_end {
            return Err(StoreError::TrailingBytes(bytes.len() - manifest_end));
        }
        let manifest =
            std::str::from_utf8(&bytes[needed..manifest_end]).map_err(|e| StoreError::Manifest(e.to_string()))?;
        let mut ids = Vec::with_capacity(count);
        for (i, line) in manifest.lines().enumerate() {
            let entry: ManifestLine =
                serde_json::from_str(line).map_err(|e| StoreError::Manifest(format!("line {}: {e}", i + 1)))?;
            if entry.row != i {
                return Err(StoreError::Manifest(format!(
                    "line {} names row {}, expected {i}",
                    i + 1,
                    entry.row
                )));
            }
            ids.push(entry.id);
        }
        if ids.len() != count {
            return Err(StoreError::CountMismatch {
                header: count,
                manifest: ids.len(),
            });
        }
        Self::new(dim, ids, data)
    }
}

pub fn write_store(store: &VectorStore, path: &Path) -> Result<(), StoreError> {
    fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<VectorStore, StoreError> {
    read_store_with_dim(path, EMBEDDING_DIM)
}

pub fn read_store_with_dim(path: &Path, expected_dim: usize) -> Result<VectorStore, StoreError> {
    let bytes = fs::read(path)?;
    VectorStore::from_bytes(&bytes, expected_dim)
}
