//! Exact L2 nearest-neighbour index over photo embeddings.
//!
//! File layout (little-endian): magic `SBIX`, `u16` version, `u16` dim,
//! `u64` count, then per entry `u32` id length, id bytes, `u32` category
//! length (`u32::MAX` when absent), category bytes, `dim` × `f32`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const INDEX_MAGIC: &[u8; 4] = b"SBIX";
pub const INDEX_VERSION: u16 = 1;
pub const HEADER_BYTES: u64 = 16;
const NO_CATEGORY: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector has {got} values, index dimension is {dim}")]
    Dim { dim: usize, got: usize },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("index is a snapshot and cannot be modified")]
    Frozen,
    #[error("index must be snapshotted before {0}")]
    NotSnapshot(&'static str),
    #[error("index is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
    #[error("corrupt index at byte {offset}: {msg}")]
    Corrupt { offset: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = IndexError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub distance: f64,
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    categories: Vec<Option<String>>,
    vectors: Vec<f32>,
    seen: HashSet<String>,
    frozen: bool,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > u16::MAX as usize {
            return Err(IndexError::Invalid(format!("dimension {dim} outside 1..=65535")));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            categories: Vec::new(),
            vectors: Vec::new(),
            seen: HashSet::new(),
            frozen: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_snapshot(&self) -> bool {
        self.frozen
    }

    pub fn add(&mut self, id: impl Into<String>, vector: &[f32], category: Option<String>) -> Result<()> {
        if self.frozen {
            return Err(IndexError::Frozen);
        }
        let id = id.into();
        if vector.len() != self.dim {
            return Err(IndexError::Dim {
                dim: self.dim,
                got: vector.len(),
            });
        }
        if self.seen.contains(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        self.seen.insert(id.clone());
        self.ids.push(id);
        self.categories.push(category);
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    /// Freezes the index; further `add` calls fail.
    pub fn snapshot(&mut self) {
        self.frozen = true;
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn category(&self, i: usize) -> Option<&str> {
        self.categories[i].as_deref()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// `‖scale·q − v‖₂` for every entry, in insertion order.
    pub fn distances(&self, q: &[f32], scale: f32) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(IndexError::Dim {
                dim: self.dim,
                got: q.len(),
            });
        }
        let s = scale as f64;
        let sq: Vec<f64> = q.iter().map(|&x| s * x as f64).collect();
        Ok(self
            .vectors
            .chunks_exact(self.dim)
            .map(|v| {
                v.iter()
                    .zip(&sq)
                    .map(|(&a, &b)| {
                        let d = b - a as f64;
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }

    /// The `k` nearest entries to `scale·q`, ascending by distance with
    /// ties broken by id.
    pub fn query(&self, q: &[f32], k: usize, scale: f32) -> Result<Vec<Hit>> {
        if !self.frozen {
            return Err(IndexError::NotSnapshot("querying"));
        }
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        if k == 0 {
            return Err(IndexError::Invalid("k must be at least 1".into()));
        }
        let d = self.distances(q, scale)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        let cmp = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then_with(|| self.ids[*a].cmp(&self.ids[*b]));
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| Hit {
                id: self.ids[i].clone(),
                distance: d[i],
                category: self.categories[i].clone(),
            })
            .collect())
    }

    /// Bytes taken by the vectors alone.
    pub fn vector_payload_bytes(&self) -> u64 {
        (self.len() * self.dim * 4) as u64
    }

    /// Size of the serialized index.
    pub fn file_size(&self) -> u64 {
        HEADER_BYTES
            + self
                .ids
                .iter()
                .zip(&self.categories)
                .map(|(id, c)| 8 + id.len() as u64 + c.as_ref().map_or(0, |c| c.len() as u64) + self.dim as u64 * 4)
                .sum::<u64>()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        if !self.frozen {
            return Err(IndexError::NotSnapshot("saving"));
        }
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u16).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for i in 0..self.len() {
            let id = self.ids[i].as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id)?;
            match &self.categories[i] {
                Some(c) => {
                    w.write_all(&(c.len() as u32).to_le_bytes())?;
                    w.write_all(c.as_bytes())?;
                }
                None => w.write_all(&NO_CATEGORY.to_le_bytes())?,
            }
            for v in self.vector(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(self.file_size() as usize);
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Reads an index; the result is always a snapshot.
    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut c = Reader { inner: r, offset: 0 };
        let magic = c.bytes(4, "magic")?;
        if magic != INDEX_MAGIC {
            return Err(IndexError::Corrupt {
                offset: 0,
                msg: format!("bad magic {magic:?}"),
            });
        }
        let version = u16::from_le_bytes(c.array("version")?);
        if version != INDEX_VERSION {
            return Err(c.corrupt(format!("unsupported version {version}")));
        }
        let dim = u16::from_le_bytes(c.array("dim")?) as usize;
        if dim == 0 {
            return Err(c.corrupt("dimension 0".into()));
        }
        let count = u64::from_le_bytes(c.array("count")?);
        let mut index = Self::new(dim)?;
        for _ in 0..count {
            let at = c.offset;
            let id = c.string("id")?;
            let cat_len = u32::from_le_bytes(c.array("category length")?);
            let category = if cat_len == NO_CATEGORY {
                None
            } else {
                Some(c.string_of(cat_len as usize, "category")?)
            };
            let raw = c.bytes(dim * 4, "vector")?;
            let v: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            index.add(id, &v, category).map_err(|e| IndexError::Corrupt {
                offset: at,
                msg: e.to_string(),
            })?;
        }
        let mut extra = [0u8; 1];
        if c.inner.read(&mut extra)? != 0 {
            return Err(c.corrupt("trailing bytes after the last record".into()));
        }
        index.snapshot();
        Ok(index)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(bytes.as_slice())
    }

    /// SHA-256 of the serialized index, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn corrupt(&self, msg: String) -> IndexError {
        IndexError::Corrupt {
            offset: self.offset,
            msg,
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(n.min(1 << 20));
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            return Err(self.corrupt(format!("truncated {what}: wanted {n} bytes, found {got}")));
        }
        self.offset += n as u64;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.bytes(N, what)?.try_into().expect("exact length"))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = u32::from_le_bytes(self.array(what)?) as usize;
        self.string_of(n, what)
    }

    fn string_of(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.offset;
        String::from_utf8(self.bytes(n, what)?).map_err(|_| IndexError::Corrupt {
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EmbeddingIndex {
        let mut ix = EmbeddingIndex::new(2).unwrap();
        ix.add("b", &[1.0, 0.0], Some("x".into())).unwrap();
        ix.add("a", &[-1.0, 0.0], None).unwrap();
        ix.add("c", &[0.0, 3.0], Some("y".into())).unwrap();
        ix.snapshot();
        ix
    }

    #[test]
    fn add_grows_and_rejects_duplicates_and_bad_dims() {
        let mut ix = EmbeddingIndex::new(3).unwrap();
        ix.add("a", &[0.0; 3], None).unwrap();
        assert_eq!(ix.len(), 1);
        assert!(matches!(ix.add("a", &[1.0; 3], None), Err(IndexError::DuplicateId(_))));
        assert!(matches!(ix.add("b", &[1.0; 2], None), Err(IndexError::Dim { .. })));
        ix.snapshot();
        assert!(matches!(ix.add("c", &[1.0; 3], None), Err(IndexError::Frozen)));
    }

    #[test]
    fn doubled_query_is_found_at_distance_zero() {
        let ix = small();
        let hits = ix.query(&[0.0, 1.5], 1, 2.0).unwrap();
        assert_eq!((hits[0].id.as_str(), hits[0].distance), ("c", 0.0));
    }

    #[test]
    fn ties_break_by_id_and_k_is_capped() {
        let ix = small();
        let hits = ix.query(&[0.0, 0.0], 10, 2.0).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(hits[0].distance, hits[1].distance);
    }

    #[test]
    fn query_preconditions() {
        let mut ix = EmbeddingIndex::new(2).unwrap();
        ix.add("a", &[0.0, 0.0], None).unwrap();
        assert!(matches!(ix.query(&[0.0, 0.0], 1, 1.0), Err(IndexError::NotSnapshot(_))));
        let mut empty = EmbeddingIndex::new(2).unwrap();
        empty.snapshot();
        assert!(matches!(empty.query(&[0.0, 0.0], 1, 1.0), Err(IndexError::Empty)));
    }

    #[test]
    fn round_trip_and_size_formula() {
        let ix = small();
        let bytes = ix.to_bytes().unwrap();
        // header + 3 × (8 + dim·4) + id bytes (3) + category bytes (2)
        assert_eq!(bytes.len() as u64, 16 + 3 * (8 + 8) + 3 + 2);
        assert_eq!(bytes.len() as u64, ix.file_size());
        assert_eq!(&bytes[..4], b"SBIX");
        assert_eq!(EmbeddingIndex::read(bytes.as_slice()).unwrap(), ix);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = small().to_bytes().unwrap();
        for cut in [0, 3, 10, 17, bytes.len() - 1] {
            match EmbeddingIndex::read(&bytes[..cut]) {
                Err(IndexError::Corrupt { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingIndex::read(bad.as_slice()), Err(IndexError::Corrupt { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(EmbeddingIndex::read(long.as_slice()).is_err());
    }
}
