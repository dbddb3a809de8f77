//! Binary container shared by checkpoints and feature caches: an 8-byte
//! magic, a little-endian u64 header length, a JSON header, then the
//! concatenated little-endian f64 payloads in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MELABC01";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub entries: Vec<(Entry, Vec<f64>)>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((
            Entry {
                name: name.into(),
                shape,
            },
            data,
        ));
    }

    pub fn get(&self, name: &str) -> Option<&(Entry, Vec<f64>)> {
        self.entries.iter().find(|(e, _)| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: 1,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            entries: self.entries.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let payload: usize = self.entries.iter().map(|(_, d)| d.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in &self.entries {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, ContainerError> {
        let bad = |detail: String| ContainerError::Format {
            path: path.to_string(),
            detail,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a container file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.version != 1 {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let mut offset = 16 + hlen;
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad(format!("payload for {} truncated", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 8 * n;
            entries.push((e, data));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after payload".into()));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
