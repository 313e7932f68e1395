//! Binary checkpoint format.
//!
//! Layout: 6-byte magic `ANESI1`, format version as `u32` LE, then a sequence
//! of tensor records until EOF. Each record is `name_len: u32`, the UTF-8
//! name, `rank: u32`, one `u32` per dimension, and the row-major `f64` data,
//! all little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"ANESI1";
pub const VERSION: u32 = 1;

/// Caps a single tensor's element count so corrupt headers cannot trigger
/// huge allocations.
const MAX_ELEMENTS: u64 = 1 << 28;
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes, not an ANESI1 checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("implausible header field: {0}")]
    ImplausibleHeader(String),
    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn to_bytes<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut entries = Vec::new();
    while !cur.at_end() {
        let name_len = cur.u32("name length")?;
        if name_len > MAX_NAME_LEN {
            return Err(CheckpointError::ImplausibleHeader(format!(
                "name length {name_len}"
            )));
        }
        let name = std::str::from_utf8(cur.take(name_len as usize, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = cur.u32("rank")?;
        if rank > MAX_RANK {
            return Err(CheckpointError::ImplausibleHeader(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let d = cur.u32("dimension")? as u64;
            elements = elements.saturating_mul(d);
            shape.push(d as usize);
        }
        if elements > MAX_ELEMENTS {
            return Err(CheckpointError::ImplausibleHeader(format!(
                "{elements} elements"
            )));
        }
        // verify the payload is present before allocating for it
        if ((cur.buf.len() - cur.pos) as u64) < elements * 8 {
            return Err(CheckpointError::Truncated("tensor data"));
        }
        let mut data = Vec::with_capacity(elements as usize);
        for _ in 0..elements {
            data.push(cur.f64("tensor data")?);
        }
        let tensor = Tensor::new(shape, data).expect("shape matches data by construction");
        if !tensor.all_finite() {
            return Err(CheckpointError::NonFinite(name));
        }
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn save<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<(String, Tensor)> {
        vec![
            (
                "pred.f0.w0".to_string(),
                Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-12, 6.0]).unwrap(),
            ),
            ("prior.u0".to_string(), Tensor::vector(vec![-2.2522; 10])),
            ("theta.b1".to_string(), Tensor::scalar(0.25)),
        ]
    }

    #[test]
    fn roundtrip_preserves_names_shapes_and_bits() {
        let entries = sample_entries();
        let bytes = to_bytes(entries.iter().map(|(n, t)| (n.as_str(), t)));
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), entries.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            assert_eq!(t0.data(), t1.data());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = to_bytes(sample_entries().iter().map(|(n, t)| (n.as_str(), t)));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = to_bytes(sample_entries().iter().map(|(n, t)| (n.as_str(), t)));
        for cut in [bytes.len() - 3, bytes.len() - 9, 11, 7, 3] {
            assert!(
                matches!(
                    from_bytes(&bytes[..cut]),
                    Err(CheckpointError::Truncated(_))
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let mut bytes = to_bytes(sample_entries().iter().map(|(n, t)| (n.as_str(), t)));
        bytes[6..10].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(7))
        ));
    }

    #[test]
    fn huge_claimed_tensor_is_rejected_without_allocating() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::ImplausibleHeader(_))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.anesi");
        let entries = sample_entries();
        save(&path, entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].0, "prior.u0");
    }
}
