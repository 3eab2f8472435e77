//! Binary tensor-table checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "AGRGAN01"
//! version  u8       1
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (rank × u64)
//!   payload  product(dims) × f64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AGRGAN01";
pub const VERSION: u8 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| n.len() + 8 + 8 * (t.rank() + t.numel())).sum();
    let mut out = Vec::with_capacity(13 + payload);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an AGRGAN01 file)".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            Error::CheckpointTensor {
                name: name.clone(),
                reason: "dimension overflow".into(),
            }
        })?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::CheckpointTensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Matches a loaded table against the expected names and shapes. Every
/// expected tensor must be present with the right shape and nothing else
/// may be present; the first offending tensor is named in the error.
pub fn match_table(
    expected: &[(String, Vec<usize>)],
    loaded: Vec<(String, Tensor)>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
    for (n, t) in loaded {
        if map.insert(n.clone(), t).is_some() {
            return Err(Error::CheckpointTensor {
                name: n,
                reason: "duplicate entry".into(),
            });
        }
    }
    for (name, shape) in expected {
        match map.get(name) {
            None => {
                return Err(Error::CheckpointTensor {
                    name: name.clone(),
                    reason: "missing (checkpoint was written for a different profile?)".into(),
                })
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::CheckpointTensor {
                    name: name.clone(),
                    reason: format!("shape {:?} does not match expected {:?}", t.shape(), shape),
                })
            }
            _ => {}
        }
    }
    if let Some(extra) = map.keys().find(|k| !expected.iter().any(|(n, _)| n == *k)) {
        return Err(Error::CheckpointTensor {
            name: extra.clone(),
            reason: "unexpected tensor (checkpoint was written for a different profile?)".into(),
        });
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2)),
            ("b".into(), Tensor::scalar(f64::MIN_POSITIVE)),
        ]
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&table());
        assert_eq!(&bytes[..8], b"AGRGAN01");
        assert_eq!(bytes[8], 1);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 8);
        assert_eq!(&bytes[17..25], b"a.weight");
    }

    #[test]
    fn decode_inverts_encode() {
        let t = table();
        let bytes = encode(&t);
        assert_eq!(decode(&bytes).unwrap(), t);
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode(&table());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut bytes = encode(&table());
        bytes[8] = 9;
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn match_table_names_offender() {
        let expected = vec![("a.weight".to_string(), vec![2, 4]), ("b".to_string(), vec![1])];
        let err = match_table(&expected, table()).unwrap_err().to_string();
        assert!(err.contains("a.weight"), "{err}");
        let expected = vec![("a.weight".to_string(), vec![2, 3])];
        let err = match_table(&expected, table()).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }
}
