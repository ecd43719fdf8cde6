//! Named-tensor checkpoint archive.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "MBCK" | version | tensor_count |
//!   per tensor: name_len | name (UTF-8) | rank | dims[rank] | f32 LE data
//! ```

use std::fs;
use std::path::Path;

use mbcap_core::numerics::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 4] = b"MBCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint archive (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, expected {FORMAT_VERSION}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor name is not UTF-8")]
    Name,
    #[error("tensor `{0}` has a zero or oversized dimension")]
    Shape(String),
    #[error("{0}")]
    Params(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::Name)?.to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d) })
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| CheckpointError::Shape(name.clone()))?;
        let data: Vec<f32> = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|_| CheckpointError::Shape(name.clone()))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes(buf.len() - r.pos));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the archive a store would be saved as.
pub fn fingerprint(store: &ParamStore) -> String {
    sha256_hex(&encode(&store.named_values()))
}

/// Writes the archive and returns its SHA-256.
pub fn save(store: &ParamStore, path: &Path) -> Result<String, CheckpointError> {
    let bytes = encode(&store.named_values());
    fs::write(path, &bytes).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Loads tensors into a store built with the same layout; names and shapes must match.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let named = decode(&bytes)?;
    store.load_values(&named).map_err(|e| CheckpointError::Params(e.to_string()))
}

fn io_err(path: &Path, e: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), message: e.to_string() }
}
