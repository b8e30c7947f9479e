//! `HKD1` checkpoint format.
//!
//! ```text
//! "HKD1"
//! u32 tensor count
//! per tensor: u16 name length, name (UTF-8), u8 dtype (0 = f32), u8 rank,
//!             rank × u32 dims, u64 byte offset into the payload
//! u64 payload length
//! payload: f32 values, little-endian, in table order
//! ```
//!
//! All integers are little-endian. Tensors are written in sorted name order,
//! so equal stores always produce identical bytes.

use std::fs;
use std::path::Path;

use hkd_tensor::Tensor;

use crate::error::{CheckpointError, CoreError, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"HKD1";
const DTYPE_F32: u8 = 0;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut payload = Vec::with_capacity(store.count() * 4);
    for (name, t) in store.iter() {
        header.extend_from_slice(&(name.len() as u16).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(DTYPE_F32);
        header.push(t.rank() as u8);
        for &d in t.shape() {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    header.extend_from_slice(&payload);
    header
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Truncated(format!("{what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint; nothing is returned unless every tensor is intact.
pub fn decode(bytes: &[u8]) -> std::result::Result<ParamStore, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let count = r.u32("tensor count")?;
    let mut table = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Malformed(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let offset = r.u64("offset")? as usize;
        table.push((name, dims, offset));
    }
    let payload_len = r.u64("payload length")? as usize;
    let payload = r.take(payload_len, "payload")?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    let mut store = ParamStore::new();
    let mut expected_offset = 0usize;
    for (name, dims, offset) in table {
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: dims overflow")))?;
        if offset != expected_offset {
            return Err(CheckpointError::Malformed(format!(
                "{name}: offset {offset}, expected {expected_offset}"
            )));
        }
        let end = offset + numel * 4;
        let raw = payload.get(offset..end).ok_or_else(|| {
            CheckpointError::Truncated(format!("{name} extends past the payload"))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        if store.contains(&name) {
            return Err(CheckpointError::Malformed(format!("{name} appears twice")));
        }
        store.insert(name, t);
        expected_offset = end;
    }
    if expected_offset != payload_len {
        return Err(CheckpointError::Malformed(format!(
            "payload holds {payload_len} bytes but tensors cover {expected_offset}"
        )));
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)).map_err(|e| CoreError::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Checks that `found` holds exactly the tensors of `expected` with the
/// same shapes.
pub fn check_layout(expected: &ParamStore, found: &ParamStore) -> Result<(), CheckpointError> {
    for (name, t) in found.iter() {
        match expected.get(name) {
            None => return Err(CheckpointError::UnknownParameter(name.to_string())),
            Some(e) if e.shape() != t.shape() => {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: e.shape().to_vec(),
                    found: t.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(name) = expected.names().find(|n| !found.contains(n)) {
        return Err(CheckpointError::MissingParameter(name.to_string()));
    }
    Ok(())
}

/// Bytes taken by the table and framing for `store`, excluding values.
pub fn header_len(store: &ParamStore) -> usize {
    4 + 4 + 8
        + store
            .iter()
            .map(|(n, t)| 2 + n.len() + 2 + 4 * t.rank() + 8)
            .sum::<usize>()
}
