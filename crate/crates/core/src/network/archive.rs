//! Flat archive of named f32 tensors with a JSON index, used for pretrained
//! weights and training checkpoints.
//!
//! Layout: an 8-byte little-endian header length, the JSON header, then the
//! raw tensor payload. The header maps each tensor name to its shape, dtype
//! and byte offset within the payload, and carries a free-form metadata
//! object (model config, epoch, best validation loss, PRNG state).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndexEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: BTreeMap<String, TensorIndexEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// In-memory tensor archive. Tensor names are sorted, so serialization is
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub metadata: serde_json::Value,
}

impl TensorArchive {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.insert(name.into(), (shape, data));
    }

    pub fn get(&self, name: &str) -> Option<&(Vec<usize>, Vec<f32>)> {
        self.tensors.get(name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut header = Header {
            tensors: BTreeMap::new(),
            metadata: self.metadata.clone(),
        };
        let mut offset = 0u64;
        for (name, (shape, data)) in &self.tensors {
            header.tensors.insert(
                name.clone(),
                TensorIndexEntry {
                    shape: shape.clone(),
                    dtype: "f32".to_string(),
                    offset,
                },
            );
            offset += (data.len() * 4) as u64;
        }
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Data(format!("checkpoint header encode: {e}")))?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        file.write_all(&header_bytes).map_err(|e| Error::io(path, e))?;
        let mut payload = Vec::with_capacity(offset as usize);
        for (_, data) in self.tensors.values() {
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&payload).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<TensorArchive> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Data(format!("{}: bad checkpoint header: {e}", path.display())))?;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let mut tensors = BTreeMap::new();
        for (name, entry) in header.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Data(format!(
                    "{}: tensor {name} has unsupported dtype {}",
                    path.display(),
                    entry.dtype
                )));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + count * 4;
            if end > payload.len() {
                return Err(Error::Data(format!(
                    "{}: tensor {name} extends past the payload",
                    path.display()
                )));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(name, (entry.shape, data));
        }
        Ok(TensorArchive {
            tensors,
            metadata: header.metadata,
        })
    }
}
