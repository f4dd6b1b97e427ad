//! Tensor archive files.
//!
//! Layout:
//!
//! ```text
//! [u64 LE: header length N][N bytes: JSON header][data section]
//! ```
//!
//! The header maps tensor name to `{dtype, shape, byte_offset, byte_length}`,
//! with `byte_offset` counted from the start of the data section. Data is raw
//! little-endian `f32` or `f64`. Names are written in sorted order and the JSON
//! is compact, so equal contents always produce equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, (DType, Tensor)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dtype: DType, tensor: Tensor) {
        self.entries.insert(name.into(), (dtype, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|(_, t)| t)
    }

    pub fn dtype(&self, name: &str) -> Option<DType> {
        self.entries.get(name).map(|(d, _)| *d)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.entries.into_iter().map(|(k, (_, t))| (k, t)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        let mut data = Vec::new();
        for (name, (dtype, tensor)) in &self.entries {
            let offset = data.len() as u64;
            match dtype {
                DType::F64 => {
                    for v in tensor.data() {
                        data.extend_from_slice(&v.to_le_bytes());
                    }
                }
                DType::F32 => {
                    for v in tensor.data() {
                        data.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
            }
            header.insert(
                name.clone(),
                EntryHeader {
                    dtype: *dtype,
                    shape: tensor.shape().to_vec(),
                    byte_offset: offset,
                    byte_length: data.len() as u64 - offset,
                },
            );
        }
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header.len() + data.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Archive("file shorter than the length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let data_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Archive("header length runs past end of file".into()))?;
        let header: BTreeMap<String, EntryHeader> =
            serde_json::from_slice(&bytes[8..data_start])?;
        let data = &bytes[data_start..];

        let mut archive = TensorArchive::new();
        for (name, entry) in header {
            let numel: usize = entry.shape.iter().product();
            let expected = numel * entry.dtype.width();
            if entry.byte_length as usize != expected {
                return Err(Error::Archive(format!(
                    "`{name}`: byte_length {} does not match shape {:?}",
                    entry.byte_length, entry.shape
                )));
            }
            let start = entry.byte_offset as usize;
            let raw = data
                .get(start..start + expected)
                .ok_or_else(|| Error::Archive(format!("`{name}`: payload out of bounds")))?;
            let values = match entry.dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let tensor = Tensor::from_vec(entry.shape, values)?;
            archive.insert(name, entry.dtype, tensor);
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
