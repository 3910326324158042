//! Binary named-tensor container.
//!
//! Layout (all integers little-endian):
//! `b"PFCK"`, `u32` version, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rank, `u64` per dimension,
//! raw `f64` payload; finally a `u64` FNV-1a checksum of everything before it.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PFCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn write_checkpoint<W: Write>(mut out: W, store: &ParamStore) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("unexpected end while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Reads every named tensor, in file order.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut cur = Cursor { bytes: &bytes, pos: 4 };
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 8 + 8 {
        return Err(CheckpointError::Corrupt("file too short".into()));
    }
    let body_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
    if stored != fnv1a(&bytes[..body_len]) {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    cur.bytes = &bytes[..body_len];
    let count = cur.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        if !(1..=2).contains(&rank) {
            return Err(CheckpointError::Corrupt(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8, "payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        out.push((name, t));
    }
    if cur.pos != cur.bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

impl ParamStore {
    /// Overwrites every parameter from `tensors`, matching by name and shape.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Tensor)>) -> Result<(), CheckpointError> {
        if tensors.len() != self.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} tensors in file, model has {}",
                tensors.len(),
                self.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .find(&name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor `{name}`")))?;
            if self.get(id).shape() != t.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            *self.get_mut(id) = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 3.0]]).unwrap());
        s.add("b", Tensor::row(vec![0.1, 0.2, 0.3]));
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s).unwrap();
        let mut fresh = store();
        fresh.get_mut(fresh.find("b").unwrap()).data_mut()[0] = 9.0;
        fresh.load_tensors(read_checkpoint(&buf[..]).unwrap()).unwrap();
        for ((_, x), (_, y)) in s.iter().zip(fresh.iter()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn truncation_and_corruption_are_reported() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store()).unwrap();
        let err = read_checkpoint(&buf[..buf.len() - 5]).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt(_)), "{err}");
        let mut flipped = buf.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(read_checkpoint(&flipped[..]), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(read_checkpoint(&b"nope"[..]), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store()).unwrap();
        buf[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&buf[..]),
            Err(CheckpointError::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store()).unwrap();
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[2, 2]));
        other.add("b", Tensor::zeros(&[1, 4]));
        assert!(matches!(
            other.load_tensors(read_checkpoint(&buf[..]).unwrap()),
            Err(CheckpointError::Mismatch(_))
        ));
    }
}
