//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SOC1" | version: u32 | entry count: u32
//! per entry: name length: u32 | UTF-8 name | rank: u32 | dims: u64 × rank | f64 × numel
//! CRC32 (IEEE) of every preceding byte: u32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SOC1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f64>)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated entry"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces the entry `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`get`](Self::get), but a missing entry is an error.
    pub fn require(&self, name: &str) -> Result<&Tensor<f64>> {
        self.get(name).ok_or_else(|| corrupt(format!("missing entry {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.require(name)?.item()
    }

    pub fn entries(&self) -> &[(String, Tensor<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("CRC mismatch"));
        }
        if &body[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("entry name is not UTF-8"))?.to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().and_then(|d| usize::try_from(d).map_err(|_| corrupt("dimension overflow"))))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("size overflow"))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if ck.get(&name).is_some() {
                return Err(corrupt(format!("duplicate entry {name}")));
            }
            ck.entries.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after last entry"));
        }
        Ok(ck)
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => corrupt(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("a", Tensor::from_fn([2, 3], |i| i as f64 * 0.1 - 0.2));
        ck.insert("scalar", Tensor::scalar(f64::MIN_POSITIVE));
        ck.insert("neg_zero", Tensor::vector(vec![-0.0, f64::MAX, 1e-310]));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.len(), ck.len());
        for ((n1, t1), (n2, t2)) in ck.entries().iter().zip(back.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.dims(), t2.dims());
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SOC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        assert!(Checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 15, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }

    proptest! {
        #[test]
        fn any_single_byte_corruption_is_detected(pos in 0usize..10_000, flip in 1u8..=255) {
            let bytes = sample().to_bytes();
            let mut bad = bytes.clone();
            let i = pos % bad.len();
            bad[i] ^= flip;
            prop_assert!(Checkpoint::from_bytes(&bad).is_err());
        }

        #[test]
        fn random_tensors_round_trip(vals in proptest::collection::vec(any::<f64>(), 0..40), rows in 1usize..5) {
            let n = vals.len() / rows * rows;
            let mut ck = Checkpoint::new();
            ck.insert("t", Tensor::new([rows, n / rows], vals[..n].to_vec()).unwrap());
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            let (a, b) = (ck.require("t").unwrap(), back.require("t").unwrap());
            prop_assert_eq!(a.dims(), b.dims());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
