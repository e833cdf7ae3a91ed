//! Binary container for named f32 arrays with a text metadata block.
//!
//! Layout (all integers little-endian):
//!
//! | offset          | size    | field                                   |
//! |-----------------|---------|-----------------------------------------|
//! | 0               | 8       | magic `DCLSCKPT`                        |
//! | 8               | 4       | container format version (u32, = 1)     |
//! | 12              | 4       | metadata length `M` (u32)               |
//! | 16              | M       | UTF-8 metadata, `key: value` per line   |
//! | 16+M            | 4       | array count `A` (u32)                   |
//! | ...             | ...     | `A` array records (see below)           |
//! | ...             | 8       | data section length `D` (u64)           |
//! | ...             | D       | data section: f32 values                |
//!
//! Array record: name length (u32), name bytes (UTF-8), rank (u32),
//! `rank` extents (u64 each), byte offset into the data section (u64),
//! byte length (u64). Offsets are 4-byte aligned and arrays appear in
//! record order without overlap.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DCLSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("container format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("missing array '{0}'")]
    MissingArray(String),
    #[error("corrupt container: metadata: {0}")]
    Metadata(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: KeyValues,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn array(&self, name: &str) -> Result<&Tensor<f32>, ContainerError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ContainerError::MissingArray(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.meta.render(": ");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let bytes = 4 * t.len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&bytes.to_le_bytes());
            offset += bytes;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ContainerError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| ContainerError::Corrupt("metadata is not UTF-8".into()))?;
        let meta = KeyValues::parse(meta_text, ':')?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ContainerError::Corrupt("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 16 {
                return Err(ContainerError::Corrupt(format!("array '{name}' has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64()?;
            let len = r.u64()?;
            let elems = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if elems.and_then(|e| e.checked_mul(4)) != Some(len as usize) {
                return Err(ContainerError::Corrupt(format!("array '{name}' byte length disagrees with shape")));
            }
            records.push((name, shape, offset, len));
        }
        let data_len = r.u64()?;
        let data = r.take(data_len as usize)?;
        if r.pos != bytes.len() {
            return Err(ContainerError::Corrupt("trailing bytes after data section".into()));
        }
        let mut expected_offset = 0u64;
        let mut arrays = Vec::with_capacity(records.len());
        for (name, shape, offset, len) in records {
            if offset != expected_offset || offset + len > data_len {
                return Err(ContainerError::Corrupt(format!("array '{name}' has inconsistent offset")));
            }
            expected_offset += len;
            let raw = &data[offset as usize..(offset + len) as usize];
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, values).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
            arrays.push((name, t));
        }
        if expected_offset != data_len {
            return Err(ContainerError::Corrupt("data section length disagrees with arrays".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ContainerError::Corrupt(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
