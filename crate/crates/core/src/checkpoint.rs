//! Binary checkpoint format.
//!
//! Layout, little-endian throughout: magic `CXRC`, `u16` version, `u32`
//! config length and UTF-8 config text, `u32` record count, then per
//! parameter a `u32` name length, the name, a `u32` rank, `rank` `u32`
//! dims and the `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CXRC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `key=value` lines describing the model that produced the parameters.
    pub config: String,
    pub params: Vec<(String, Tensor)>,
}

/// Rounds every value to the nearest `f32`, matching what the file stores.
pub fn round_to_f32(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

impl Checkpoint {
    /// Snapshot of `store`, already rounded to storage precision.
    pub fn from_store(config: impl Into<String>, store: &ParamStore) -> Self {
        Self {
            config: config.into(),
            params: store
                .iter()
                .map(|(n, t)| (n.to_string(), round_to_f32(t)))
                .collect(),
        }
    }

    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Value of `key` in the config text.
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.lines().find_map(|l| {
            let (k, v) = l.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config.len());
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in &self.params {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "header")?;
        if magic != MAGIC {
            return Err(Error::corrupt("header", "bad magic bytes"));
        }
        let version = u16::from_le_bytes(r.take(2, "header")?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::corrupt("header", format!("unsupported version {version}")));
        }
        let len = r.u32("config")?;
        let config = String::from_utf8(r.take(len, "config")?.to_vec())
            .map_err(|_| Error::corrupt("config", "not UTF-8"))?;
        let count = r.u32("header")?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let fallback = format!("parameter #{i}");
            let len = r.u32(&fallback)?;
            let name = String::from_utf8(r.take(len, &fallback)?.to_vec())
                .map_err(|_| Error::corrupt(&fallback, "name is not UTF-8"))?;
            let rank = r.u32(&name)?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32(&name)?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= bytes.len())
                .ok_or_else(|| Error::corrupt(&name, "implausible shape"))?;
            let raw = r.take(numel * 4, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::corrupt(&name, e.to_string()))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::corrupt("trailer", format!("{} unexpected bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, record: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::corrupt(record, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, record: &str) -> Result<usize> {
        let b = self.take(4, record)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ContrastiveModel, EncoderConfig};

    fn sample() -> Checkpoint {
        let m = ContrastiveModel::new(EncoderConfig::default(), 32, 5).unwrap();
        Checkpoint::from_store("kind=simclr\nproj_dim=32\n", &m.store)
    }

    #[test]
    fn round_trip_is_lossless() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config_value("proj_dim"), Some("32"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap(), ck);
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            config: "a=1".into(),
            params: vec![("w".into(), Tensor::new(&[2], vec![1.0, -0.5]).unwrap())],
        };
        let b = ck.encode();
        let mut expected = b"CXRC".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&3u32.to_le_bytes());
        expected.extend_from_slice(b"a=1");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"w");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn truncation_names_the_record() {
        let ck = sample();
        let bytes = ck.encode();
        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::decode(cut) {
            Err(Error::Corrupt { record, .. }) => assert_eq!(&record, &ck.params.last().unwrap().0),
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_corrupt_header() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(Error::Corrupt { record, .. }) if record == "header"
        ));
    }

    #[test]
    fn stored_values_are_f32_exact() {
        let ck = sample();
        for (_, t) in &ck.params {
            assert!(t.data().iter().all(|&v| v == v as f32 as f64));
        }
    }
}
