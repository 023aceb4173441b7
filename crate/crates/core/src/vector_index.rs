//! Exact cosine nearest-neighbour index over unit vectors.
//!
//! Search is a flat scan: every entry is scored, so results are exact and
//! reproducible (ties go to the smaller chunk id).
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! magic "HRVI" | version u32 | dim u32 | count u64
//! count × ( id_len u32 | id bytes | dim × f32 )
//! crc32 u32   (over every preceding byte)
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{dot, EmbeddingVector};

const MAGIC: &[u8; 4] = b"HRVI";
pub const FORMAT_VERSION: u32 = 1;
const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, vector has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector for {0:?} is not unit-norm")]
    NotNormalized(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported index file (magic {magic:?}, version {version})")]
    VersionMismatch { magic: [u8; 4], version: u32 },
    #[error("checksum mismatch: file is truncated or corrupted")]
    ChecksumMismatch,
    #[error("malformed index file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Vector,
    Graph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub chunk_id: String,
    pub score: f64,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    /// Keyed by chunk id so iteration and the file layout depend only on
    /// the contents, not on insertion history.
    entries: BTreeMap<String, EmbeddingVector>,
}

/// Heap entry ordered so that the *worst* hit sits on top.
struct Worst<'a> {
    score: f64,
    id: &'a str,
}

impl PartialEq for Worst<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst<'_> {}
impl PartialOrd for Worst<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Lower score is worse; for equal scores the larger id is worse.
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, chunk_id: &str) -> Option<&EmbeddingVector> {
        self.entries.get(chunk_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.entries.iter().map(|(id, v)| (id.as_str(), v))
    }

    pub fn upsert(&mut self, chunk_id: &str, v: EmbeddingVector) -> Result<(), IndexError> {
        if v.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        if !v.is_unit(UNIT_TOLERANCE) {
            return Err(IndexError::NotNormalized(chunk_id.to_string()));
        }
        self.entries.insert(chunk_id.to_string(), v);
        Ok(())
    }

    pub fn remove(&mut self, chunk_id: &str) -> bool {
        self.entries.remove(chunk_id).is_some()
    }

    /// Exact top-`k` by cosine, descending; ties by ascending chunk id.
    pub fn search(&self, qv: &EmbeddingVector, k: usize) -> Result<Vec<ScoredHit>, IndexError> {
        if qv.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: qv.dim(),
            });
        }
        if k == 0 || self.entries.is_empty() {
            return Ok(Vec::new());
        }
        let mut heap: BinaryHeap<Worst<'_>> = BinaryHeap::with_capacity(k + 1);
        for (id, v) in &self.entries {
            let cand = Worst {
                score: dot(qv.values(), v.values()),
                id,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(top) = heap.peek() {
                if cand < *top {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|w| ScoredHit {
                chunk_id: w.id.to_string(),
                score: w.score,
                origin: Origin::Vector,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.entries.len() * (self.dim * 4 + 16));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, v) in &self.entries {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for x in v.values() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < 4 {
            return Err(IndexError::ChecksumMismatch);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(IndexError::ChecksumMismatch);
        }
        let mut r = Reader { buf: body, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let version = r.u32()?;
        if &magic != MAGIC || version != FORMAT_VERSION {
            return Err(IndexError::VersionMismatch { magic, version });
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let mut idx = VectorIndex::new(dim);
        for _ in 0..count {
            let id_len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(id_len)?)
                .map_err(|e| IndexError::Format(format!("chunk id is not UTF-8: {e}")))?
                .to_string();
            let raw = r.take(dim * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if idx.entries.contains_key(&id) {
                return Err(IndexError::Format(format!("duplicate chunk id {id:?}")));
            }
            idx.entries.insert(id, EmbeddingVector::from_normalized(values));
        }
        if r.pos != body.len() {
            return Err(IndexError::Format("trailing bytes after entries".into()));
        }
        Ok(idx)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        fs::write(path, self.to_bytes()).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| IndexError::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(values).unwrap()
    }

    #[test]
    fn upsert_replaces_by_id() {
        let mut idx = VectorIndex::new(2);
        idx.upsert("a", unit(&[1.0, 0.0])).unwrap();
        assert_eq!(idx.len(), 1);
        idx.upsert("a", unit(&[0.0, 1.0])).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.get("a").unwrap().values(), &[0.0, 1.0]);
    }

    #[test]
    fn wrong_dimension_rejected() {
        let mut idx = VectorIndex::new(3);
        assert!(matches!(
            idx.upsert("a", unit(&[1.0, 0.0])),
            Err(IndexError::DimensionMismatch { expected: 3, actual: 2 })
        ));
        assert!(matches!(
            idx.upsert("b", EmbeddingVector::from_normalized(vec![2.0, 0.0, 0.0])),
            Err(IndexError::NotNormalized(_))
        ));
    }

    #[test]
    fn self_similarity_ranks_first() {
        let mut idx = VectorIndex::new(3);
        idx.upsert("a", unit(&[1.0, 2.0, 3.0])).unwrap();
        idx.upsert("b", unit(&[3.0, 2.0, 1.0])).unwrap();
        let hits = idx.search(&unit(&[3.0, 2.0, 1.0]), 1).unwrap();
        assert_eq!(hits[0].chunk_id, "b");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn k_larger_than_len_returns_all_sorted() {
        let mut idx = VectorIndex::new(2);
        idx.upsert("x", unit(&[1.0, 0.0])).unwrap();
        idx.upsert("y", unit(&[0.0, 1.0])).unwrap();
        idx.upsert("z", unit(&[1.0, 1.0])).unwrap();
        let hits = idx.search(&unit(&[1.0, 0.1]), 10).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.chunk_id.as_str()).collect();
        assert_eq!(ids, vec!["x", "z", "y"]);
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let mut idx = VectorIndex::new(2);
        for id in ["c", "a", "b"] {
            idx.upsert(id, unit(&[1.0, 0.0])).unwrap();
        }
        let hits = idx.search(&unit(&[1.0, 0.0]), 2).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.chunk_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn empty_index_search_is_empty() {
        let idx = VectorIndex::new(2);
        assert!(idx.search(&unit(&[1.0, 0.0]), 5).unwrap().is_empty());
    }

    #[test]
    fn remove_drops_only_that_entry() {
        let mut idx = VectorIndex::new(2);
        for id in ["a", "b", "c"] {
            idx.upsert(id, unit(&[1.0, 0.5])).unwrap();
        }
        assert!(idx.remove("a"));
        assert!(!idx.remove("a"));
        assert_eq!(idx.len(), 2);
        assert!(idx.get("c").is_some() && idx.get("b").is_some());
    }

    #[test]
    fn roundtrip_and_corruption() {
        let mut idx = VectorIndex::new(3);
        idx.upsert("a", unit(&[1.0, 2.0, 3.0])).unwrap();
        idx.upsert("b", unit(&[-1.0, 0.5, 0.0])).unwrap();
        idx.upsert("c", unit(&[0.0, 0.0, 1.0])).unwrap();
        let bytes = idx.to_bytes();
        assert_eq!(VectorIndex::from_bytes(&bytes).unwrap(), idx);

        let truncated = &bytes[..bytes.len() - 7];
        assert!(matches!(
            VectorIndex::from_bytes(truncated),
            Err(IndexError::ChecksumMismatch)
        ));

        let empty = VectorIndex::new(3);
        assert_eq!(VectorIndex::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }

    #[test]
    fn version_mismatch_detected() {
        let mut bytes = VectorIndex::new(2).to_bytes();
        bytes[4] = 9;
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            VectorIndex::from_bytes(&bytes),
            Err(IndexError::VersionMismatch { version: 9, .. })
        ));
    }
}
