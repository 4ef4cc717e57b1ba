//! Flat binary container for named tensors: parameters, golden references
//! and serialized fusion bundles.
//!
//! Layout: the 8-byte magic `S2RMBLOB`, the JSON header length as a
//! little-endian `u64`, the UTF-8 JSON header, then every tensor's elements
//! as little-endian `f64` in header order. Header offsets count bytes from
//! the start of the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::nn::ParamTree;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"S2RMBLOB";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    entries: Vec<EntryHeader>,
    #[serde(default)]
    meta: Value,
}

/// Named tensors in insertion order plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Blob {
    pub entries: Vec<(String, Tensor)>,
    pub meta: Value,
}

impl Blob {
    pub fn new(meta: Value) -> Self {
        Self {
            entries: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Every tensor of a parameter tree, trainable and state alike.
    pub fn from_params(tree: &dyn ParamTree, meta: Value) -> Self {
        let mut blob = Self::new(meta);
        tree.for_each(&mut |name, t, _| blob.push(name, t.clone()));
        blob
    }

    /// Load a parameter tree from this blob; shapes must match exactly.
    pub fn load_into(&self, tree: &mut dyn ParamTree) -> Result<()> {
        tree.load_from(&mut |name| self.get(name).cloned())
            .map_err(Error::ParamMismatch)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut offset = 0u64;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let e = EntryHeader {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len() as u64,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            entries,
            meta: self.meta.clone(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, t) in &self.entries {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing magic bytes".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format(format!("header length {hlen} exceeds file size")))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let expected: usize = e.shape.iter().product();
            if expected as u64 != e.len {
                return Err(Error::Format(format!(
                    "entry {} declares shape {:?} but {} elements",
                    e.name, e.shape, e.len
                )));
            }
            let start = e.offset as usize;
            let end = start + 8 * expected;
            let raw = data.get(start..end).ok_or_else(|| {
                Error::Format(format!("entry {} runs past the end of the data", e.name))
            })?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, values)
                .map_err(|err| Error::Format(format!("entry {}: {err}", e.name)))?;
            entries.push((e.name, t));
        }
        Ok(Self {
            entries,
            meta: header.meta,
        })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
