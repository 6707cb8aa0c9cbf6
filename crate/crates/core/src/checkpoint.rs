//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! b"GRMP"  version
//! per tensor, in name order:
//!   name_len  name bytes (UTF-8)  rank  dims[rank]  f64 data (little-endian)
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::params::ParameterStore;

pub const MAGIC: &[u8; 4] = b"GRMP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor name is not UTF-8 at byte {0}")]
    Name(usize),
    #[error("tensors out of canonical order at `{0}`")]
    Order(String),
    #[error("invalid tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub fn encode(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut store = ParameterStore::new();
    let mut last: Option<String> = None;
    while r.pos < bytes.len() {
        let at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Name(at))?
            .to_string();
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(CheckpointError::Order(name));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or(CheckpointError::Truncated(r.pos))?;
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Tensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        store.insert(name.clone(), t);
        last = Some(name);
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParameterStore) -> Result<(), CheckpointError> {
    fs::write(path, encode(store)).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load(path: &Path) -> Result<ParameterStore, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode(&bytes)
}
