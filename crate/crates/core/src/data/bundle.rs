//! Embedding bundles: a flat little-endian container of variable-length
//! token matrices keyed by string id.
//!
//! ```text
//! "OTFE" | version u32 | D u32 | count u64
//! count x ( id_len u32 | id bytes | n u32 | n*D f32 row-major )
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numgraph::Matrix;

pub const MAGIC: [u8; 4] = *b"OTFE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BundleRecord {
    pub id: String,
    /// One row per token.
    pub tokens: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub dim: usize,
    pub records: Vec<BundleRecord>,
}

impl EmbeddingBundle {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, tokens: Matrix<f32>) -> Result<()> {
        if tokens.cols() != self.dim {
            return Err(Error::DimMismatch {
                left: tokens.cols(),
                right: self.dim,
                context: "record width vs bundle width".into(),
            });
        }
        self.records.push(BundleRecord {
            id: id.into(),
            tokens,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Id -> record position. Fails on duplicate ids.
    pub fn index(&self) -> Result<HashMap<&str, usize>> {
        let mut map = HashMap::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            if map.insert(r.id.as_str(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(map)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.index()?;
        let payload: usize = self
            .records
            .iter()
            .map(|r| 8 + r.id.len() + 4 * r.tokens.as_slice().len())
            .sum();
        let mut out = Vec::with_capacity(20 + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.dim, "embedding width")?.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            if r.tokens.cols() != self.dim {
                return Err(Error::DimMismatch {
                    left: r.tokens.cols(),
                    right: self.dim,
                    context: format!("record `{}`", r.id),
                });
            }
            out.extend_from_slice(&u32_len(r.id.len(), "id length")?.to_le_bytes());
            out.extend_from_slice(r.id.as_bytes());
            out.extend_from_slice(&u32_len(r.tokens.rows(), "token count")?.to_le_bytes());
            for v in r.tokens.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let header = |e: Option<[u8; 4]>| e.ok_or(Error::Truncated { record: 0 });
        let magic = header(cur.array())?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = u32::from_le_bytes(header(cur.array())?);
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let dim = u32::from_le_bytes(header(cur.array())?) as usize;
        let count = cur
            .array::<8>()
            .map(u64::from_le_bytes)
            .ok_or(Error::Truncated { record: 0 })?;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for k in 0..count {
            let truncated = Error::Truncated { record: k };
            let id_len = cur.array().map(u32::from_le_bytes).ok_or(truncated)? as usize;
            let id_bytes = cur.take(id_len).ok_or(Error::Truncated { record: k })?;
            let id = String::from_utf8(id_bytes.to_vec())
                .map_err(|_| Error::InvalidArgument(format!("record {k}: id is not UTF-8")))?;
            let n = cur
                .array()
                .map(u32::from_le_bytes)
                .ok_or(Error::Truncated { record: k })? as usize;
            let raw = cur
                .take(n.saturating_mul(dim).saturating_mul(4))
                .ok_or(Error::Truncated { record: k })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            records.push(BundleRecord {
                id,
                tokens: Matrix::from_vec(n, dim, data)?,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} trailing bytes after {count} records",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { dim, records })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} {n} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }
}

pub fn write_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bundle.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingBundle::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingBundle {
        let mut b = EmbeddingBundle::new(2);
        b.push("a", Matrix::from_rows(&[[1.0f32, -2.5], [0.0, 3.25]]))
            .unwrap();
        b.push("é", Matrix::from_rows(&[[f32::MIN_POSITIVE, -0.0]]))
            .unwrap();
        b.push("empty", Matrix::zeros(0, 2)).unwrap();
        b
    }

    #[test]
    fn layout_is_exact() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"OTFE");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &3u64.to_le_bytes());
        assert_eq!(&bytes[20..24], &1u32.to_le_bytes());
        assert_eq!(bytes[24], b'a');
        assert_eq!(&bytes[25..29], &2u32.to_le_bytes());
        assert_eq!(&bytes[29..33], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[33..37], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 20 + (4 + 1 + 4 + 16) + (4 + 2 + 4 + 8) + (4 + 5 + 4));
    }

    #[test]
    fn round_trip() {
        let b = sample();
        let back = EmbeddingBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn distinct_errors() {
        let good = sample().to_bytes().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            EmbeddingBundle::from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            EmbeddingBundle::from_bytes(&bad),
            Err(Error::BadVersion(9))
        ));
        // cut inside the second record's values
        let cut = 20 + 25 + 12;
        match EmbeddingBundle::from_bytes(&good[..cut]) {
            Err(e @ Error::Truncated { record: 1 }) => {
                assert_eq!(e.to_string(), "bundle truncated at record 1")
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            EmbeddingBundle::from_bytes(&good[..10]),
            Err(Error::Truncated { record: 0 })
        ));
        let mut dup = sample();
        dup.records[1].id = "a".into();
        assert!(matches!(dup.to_bytes(), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn duplicate_id_in_file() {
        let mut b = EmbeddingBundle::new(1);
        b.push("x", Matrix::from_rows(&[[1.0f32]])).unwrap();
        b.push("y", Matrix::from_rows(&[[2.0f32]])).unwrap();
        let mut bytes = b.to_bytes().unwrap();
        let second_id = 20 + 4 + 1 + 4 + 4 + 4;
        bytes[second_id] = b'x';
        assert!(matches!(
            EmbeddingBundle::from_bytes(&bytes),
            Err(Error::DuplicateId(id)) if id == "x"
        ));
    }
}
