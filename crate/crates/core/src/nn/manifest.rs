//! Weight manifest: named f32 tensors in one file.
//!
//! ```text
//! magic       8 bytes  "AECWGHT\0"
//! version     u32 LE   (1)
//! header_len  u64 LE
//! header      UTF-8 JSON {format_version, metadata, tensors: {name: {shape, offset}}}
//! blob        little-endian f32 values; `offset` is in bytes from blob start
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Fetch, Init, ParamSource};
use crate::error::{Error, Result, WeightError};

pub const MANIFEST_MAGIC: &[u8; 8] = b"AECWGHT\0";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestMetadata {
    pub model: String,
    pub config_hash: String,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: ManifestMetadata,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightManifest {
    pub metadata: ManifestMetadata,
    entries: BTreeMap<String, TensorEntry>,
    blob: Vec<f32>,
}

fn malformed(msg: impl Into<String>) -> Error {
    WeightError::Malformed(msg.into()).into()
}

impl WeightManifest {
    pub fn new(metadata: ManifestMetadata) -> Self {
        Self {
            metadata,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(malformed(format!("duplicate tensor {name}")));
        }
        if values.len() != shape.iter().product::<usize>() {
            return Err(malformed(format!("tensor {name} size does not match shape {shape:?}")));
        }
        let offset = (self.blob.len() * 4) as u64;
        self.blob.extend_from_slice(values);
        self.entries.insert(
            name.to_string(),
            TensorEntry {
                shape: shape.to_vec(),
                offset,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        let e = self.entries.get(name)?;
        let start = (e.offset / 4) as usize;
        Some((&e.shape, &self.blob[start..start + e.numel()]))
    }

    pub fn entries(&self) -> &BTreeMap<String, TensorEntry> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(TensorEntry::numel).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            format_version: MANIFEST_VERSION,
            metadata: self.metadata.clone(),
            tensors: self.entries.clone(),
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + self.blob.len() * 4);
        out.extend_from_slice(MANIFEST_MAGIC);
        out.extend_from_slice(&MANIFEST_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MANIFEST_MAGIC {
            return Err(malformed("not a weight manifest (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != MANIFEST_VERSION {
            return Err(WeightError::Version {
                found: version,
                supported: MANIFEST_VERSION,
            }
            .into());
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if header_len > body.len() {
            return Err(malformed("header runs past end of file"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| malformed(format!("header: {e}")))?;
        if header.format_version != MANIFEST_VERSION {
            return Err(WeightError::Version {
                found: header.format_version,
                supported: MANIFEST_VERSION,
            }
            .into());
        }
        let raw = &body[header_len..];
        if !raw.len().is_multiple_of(4) {
            return Err(malformed("blob length is not a multiple of 4"));
        }
        let blob: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        for (name, e) in &header.tensors {
            let end = e.offset as usize / 4 + e.numel();
            if e.offset % 4 != 0 || end > blob.len() {
                return Err(malformed(format!("tensor {name} lies outside the blob")));
            }
        }
        Ok(Self {
            metadata: header.metadata,
            entries: header.tensors,
            blob,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Binds graph parameters from a manifest and tracks which entries were used.
pub struct ManifestSource<'a> {
    manifest: &'a WeightManifest,
    used: BTreeSet<String>,
}

impl<'a> ManifestSource<'a> {
    pub fn new(manifest: &'a WeightManifest) -> Self {
        Self {
            manifest,
            used: BTreeSet::new(),
        }
    }

    pub fn unused(&self) -> Vec<String> {
        self.manifest
            .entries
            .keys()
            .filter(|k| !self.used.contains(*k))
            .cloned()
            .collect()
    }

    /// Number of values in entries that were bound.
    pub fn bound_count(&self) -> usize {
        self.used
            .iter()
            .filter_map(|k| self.manifest.entries.get(k))
            .map(TensorEntry::numel)
            .sum()
    }
}

impl ParamSource for ManifestSource<'_> {
    fn fetch(&mut self, name: &str, shape: &[usize], _: Init) -> Fetch {
        match self.manifest.get(name) {
            None => Fetch::Missing,
            Some((found, _)) if found != shape => Fetch::Shape(found.to_vec()),
            Some((_, values)) => {
                self.used.insert(name.to_string());
                Fetch::Found(values.to_vec())
            }
        }
    }
}

/// Wraps another source and copies every value it hands out into a manifest.
pub struct Recorder<'a> {
    inner: &'a mut dyn ParamSource,
    pub manifest: WeightManifest,
}

impl<'a> Recorder<'a> {
    pub fn new(inner: &'a mut dyn ParamSource, metadata: ManifestMetadata) -> Self {
        Self {
            inner,
            manifest: WeightManifest::new(metadata),
        }
    }
}

impl ParamSource for Recorder<'_> {
    fn fetch(&mut self, name: &str, shape: &[usize], init: Init) -> Fetch {
        let got = self.inner.fetch(name, shape, init);
        if let Fetch::Found(v) = &got {
            // Duplicate names are a graph bug; the first binding wins.
            let _ = self.manifest.insert(name, shape, v);
        }
        got
    }
}
