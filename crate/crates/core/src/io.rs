//! Named-array container: the on-disk format for checkpoints and cached
//! statistics.
//!
//! Layout: an 8-byte little-endian length, a UTF-8 JSON index mapping each
//! array name to `{dtype, shape, offset}`, then the raw little-endian value
//! blobs. Offsets are relative to the start of the blob region. Optional
//! metadata rides along as a reserved `__meta__` entry whose blob is UTF-8
//! JSON. Round-trips are bit-exact: values are stored as raw bytes, never
//! reformatted, and the index is a sorted map so identical contents produce
//! identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

const META_KEY: &str = "__meta__";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

/// A value buffer in one of the supported storage precisions.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn byte_len(&self) -> usize {
        self.len() * self.dtype().size_bytes()
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            ArrayData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }

    fn from_bytes(dtype: Dtype, bytes: &[u8]) -> ArrayData {
        match dtype {
            Dtype::F32 => ArrayData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Dtype::F64 => ArrayData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        }
    }

    /// Values converted to f64 regardless of storage precision.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|x| *x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

/// Typed access used by generic model code.
pub trait Element: Scalar {
    fn wrap(v: Vec<Self>) -> ArrayData;
    fn unwrap(a: &ArrayData) -> Option<&[Self]>;
}

impl Element for f32 {
    fn wrap(v: Vec<f32>) -> ArrayData {
        ArrayData::F32(v)
    }
    fn unwrap(a: &ArrayData) -> Option<&[f32]> {
        match a {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }
}

impl Element for f64 {
    fn wrap(v: Vec<f64>) -> ArrayData {
        ArrayData::F64(v)
    }
    fn unwrap(a: &ArrayData) -> Option<&[f64]> {
        match a {
            ArrayData::F64(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// An ordered collection of named arrays plus free-form JSON metadata.
#[derive(Debug, Default)]
pub struct Container {
    arrays: BTreeMap<String, NamedArray>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new() -> Self {
        Container { arrays: BTreeMap::new(), meta: serde_json::Value::Null }
    }

    pub fn insert<T: Element>(&mut self, name: &str, shape: &[usize], data: Vec<T>) {
        assert!(
            name != META_KEY,
            "array name {META_KEY} is reserved for container metadata"
        );
        let numel: usize = shape.iter().product();
        assert!(
            data.len() == numel,
            "array {name}: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.arrays.insert(name.to_string(), NamedArray { shape: shape.to_vec(), data: T::wrap(data) });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.get(name)
    }

    /// Typed fetch; errors name the array on missing entries or a storage
    /// precision mismatch.
    pub fn get_typed<T: Element>(&self, name: &str) -> Result<(&[usize], &[T])> {
        let arr = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::contract(format!("checkpoint is missing array '{name}'")))?;
        let data = T::unwrap(&arr.data).ok_or_else(|| {
            Error::contract(format!(
                "array '{name}' stored as {} but requested as {}",
                arr.data.dtype().name(),
                T::DTYPE.name()
            ))
        })?;
        Ok((&arr.shape, data))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Serializes to the container byte format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut index: BTreeMap<String, IndexEntry> = BTreeMap::new();
        let mut blobs: Vec<u8> = Vec::new();
        for (name, arr) in &self.arrays {
            index.insert(
                name.clone(),
                IndexEntry {
                    dtype: arr.data.dtype().name().to_string(),
                    shape: arr.shape.clone(),
                    offset: blobs.len() as u64,
                },
            );
            arr.data.write_bytes(&mut blobs);
        }
        if !self.meta.is_null() {
            let meta_bytes = serde_json::to_vec(&self.meta).expect("metadata serializes");
            index.insert(
                META_KEY.to_string(),
                IndexEntry {
                    dtype: "json".to_string(),
                    shape: vec![meta_bytes.len()],
                    offset: blobs.len() as u64,
                },
            );
            blobs.extend_from_slice(&meta_bytes);
        }
        let index_bytes = serde_json::to_vec(&index).expect("index serializes");
        let mut out = Vec::with_capacity(8 + index_bytes.len() + blobs.len());
        out.extend_from_slice(&(index_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&index_bytes);
        out.extend_from_slice(&blobs);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < 8 {
            return Err(Error::contract("container truncated: missing index length"));
        }
        let index_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let index_end = 8usize
            .checked_add(index_len)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| Error::contract("container truncated: index exceeds file size"))?;
        let index: BTreeMap<String, IndexEntry> = serde_json::from_slice(&bytes[8..index_end])
            .map_err(|e| Error::contract(format!("container index is not valid JSON: {e}")))?;
        let blobs = &bytes[index_end..];
        let mut arrays = BTreeMap::new();
        let mut meta = serde_json::Value::Null;
        for (name, entry) in index {
            let offset = entry.offset as usize;
            if name == META_KEY {
                let len = *entry.shape.first().unwrap_or(&0);
                let span = blobs.get(offset..offset + len).ok_or_else(|| {
                    Error::contract("container truncated: metadata exceeds file size")
                })?;
                meta = serde_json::from_slice(span)
                    .map_err(|e| Error::contract(format!("container metadata invalid: {e}")))?;
                continue;
            }
            let dtype = Dtype::parse(&entry.dtype).ok_or_else(|| {
                Error::contract(format!("array '{name}' has unknown dtype '{}'", entry.dtype))
            })?;
            let numel: usize = entry.shape.iter().product();
            let byte_len = numel * dtype.size_bytes();
            let span = blobs.get(offset..offset + byte_len).ok_or_else(|| {
                Error::contract(format!("container truncated: array '{name}' exceeds file size"))
            })?;
            arrays.insert(
                name,
                NamedArray { shape: entry.shape, data: ArrayData::from_bytes(dtype, span) },
            );
        }
        Ok(Container { arrays, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container> {
        let bytes = fs::read(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
