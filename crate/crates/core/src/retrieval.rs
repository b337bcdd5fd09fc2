//! Exact cosine search over embedded catalog documents.
//!
//! The index also has an on-disk cache format so a restart does not need
//! to re-embed the catalog:
//!
//! ```text
//! magic   b"FMVI"
//! u32     format version (1)
//! u32     dimension
//! u32     entry count
//! entry*  u32 key length, key bytes (UTF-8),
//!         u32 tag length, tag bytes (UTF-8),
//!         dimension x f32
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{render_retrieval_text, Catalog};
use crate::gateway::{normalize, Embedder, GatewayError};

pub const MODEL_TAG: &str = "model";
const MAGIC: &[u8; 4] = b"FMVI";
const FORMAT_VERSION: u32 = 1;
/// Stored vectors must be unit-norm within this tolerance.
const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index from an empty catalog")]
    EmptyCatalog,
    #[error("embedding failed for `{id}`: {source}")]
    Embedding {
        id: String,
        #[source]
        source: GatewayError,
    },
    #[error("query embedding failed: {0}")]
    QueryEmbedding(#[source] GatewayError),
    #[error("dimension mismatch: index has {expected}, vector has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("vector for `{0}` is zero or not finite")]
    DegenerateVector(String),
    #[error("k must be >= 1")]
    InvalidK,
    #[error("corrupt index cache: {0}")]
    Corrupt(String),
    #[error("index cache io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub key: String,
    pub vector: Vec<f32>,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub key: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dimension: usize,
    entries: Vec<IndexEntry>,
    by_key: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new(dimension: usize) -> Self {
        VectorIndex {
            dimension,
            entries: Vec::new(),
            by_key: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&IndexEntry> {
        self.by_key.get(key).map(|&i| &self.entries[i])
    }

    /// Adds an entry, normalizing the vector to unit length.
    pub fn insert(
        &mut self,
        key: impl Into<String>,
        mut vector: Vec<f32>,
        tag: impl Into<String>,
    ) -> Result<(), RetrievalError> {
        let key = key.into();
        if vector.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dimension,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) || !normalize(&mut vector) {
            return Err(RetrievalError::DegenerateVector(key));
        }
        self.push(key, vector, tag.into())
    }

    fn push(&mut self, key: String, vector: Vec<f32>, tag: String) -> Result<(), RetrievalError> {
        if self.by_key.contains_key(&key) {
            return Err(RetrievalError::DuplicateKey(key));
        }
        self.by_key.insert(key.clone(), self.entries.len());
        self.entries.push(IndexEntry { key, vector, tag });
        Ok(())
    }

    /// Up to `k` hits with similarity at least `min_similarity`, sorted by
    /// similarity descending and key ascending.
    pub fn search(
        &self,
        query: &[f32],
        k: usize,
        min_similarity: f64,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if query.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dimension,
                actual: query.len(),
            });
        }
        let qnorm: f64 = query.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if qnorm == 0.0 || !qnorm.is_finite() {
            return Ok(Vec::new());
        }
        let mut hits: Vec<RetrievalHit> = self
            .entries
            .iter()
            .map(|e| {
                let dot: f64 = e
                    .vector
                    .iter()
                    .zip(query)
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum();
                RetrievalHit {
                    key: e.key.clone(),
                    similarity: (dot / qnorm).clamp(-1.0, 1.0),
                }
            })
            .filter(|h| h.similarity >= min_similarity)
            .collect();
        hits.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.key.cmp(&b.key))
        });
        hits.truncate(k);
        Ok(hits)
    }

    pub fn search_text<E: Embedder + ?Sized>(
        &self,
        embedder: &E,
        text: &str,
        k: usize,
        min_similarity: f64,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        let v = embedder.embed(text).map_err(RetrievalError::QueryEmbedding)?;
        self.search(&v, k, min_similarity)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.entries.len() * (self.dimension * 4 + 32));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.key.len() as u32).to_le_bytes());
            out.extend_from_slice(e.key.as_bytes());
            out.extend_from_slice(&(e.tag.len() as u32).to_le_bytes());
            out.extend_from_slice(e.tag.as_bytes());
            for x in &e.vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<VectorIndex, RetrievalError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(RetrievalError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(RetrievalError::Corrupt(format!("unsupported version {version}")));
        }
        let dimension = r.u32()? as usize;
        let count = r.u32()? as usize;
        if dimension == 0 {
            return Err(RetrievalError::Corrupt("zero dimension".into()));
        }
        // Each entry needs at least 8 length bytes plus its vector.
        let min_entry = dimension
            .checked_mul(4)
            .and_then(|v| v.checked_add(8))
            .ok_or_else(|| RetrievalError::Corrupt("dimension overflow".into()))?;
        if count
            .checked_mul(min_entry)
            .map_or(true, |need| need > r.remaining())
        {
            return Err(RetrievalError::Corrupt("truncated entries".into()));
        }
        let mut index = VectorIndex::new(dimension);
        for _ in 0..count {
            let key = r.string()?;
            let tag = r.string()?;
            let mut vector = Vec::with_capacity(dimension);
            for _ in 0..dimension {
                vector.push(f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")));
            }
            let norm: f64 = vector.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(RetrievalError::Corrupt(format!("vector for `{key}` is not unit-norm")));
            }
            // Stored verbatim: renormalizing is not a fixed point in f32, so
            // a load/save cycle would drift.
            index.push(key, vector, tag).map_err(|e| match e {
                RetrievalError::DuplicateKey(k) => RetrievalError::Corrupt(format!("duplicate key `{k}`")),
                other => other,
            })?;
        }
        if r.remaining() != 0 {
            return Err(RetrievalError::Corrupt("trailing bytes".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VectorIndex, RetrievalError> {
        VectorIndex::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        if n > self.remaining() {
            return Err(RetrievalError::Corrupt("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, RetrievalError> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| RetrievalError::Corrupt("key is not UTF-8".into()))
    }
}

/// One entry per record, keyed by `model_id`.
pub fn build_index<E: Embedder + ?Sized>(
    catalog: &Catalog,
    embedder: &E,
) -> Result<VectorIndex, RetrievalError> {
    if catalog.is_empty() {
        return Err(RetrievalError::EmptyCatalog);
    }
    let mut index = VectorIndex::new(embedder.dimension());
    for record in catalog.iter() {
        let vector = embedder
            .embed(&render_retrieval_text(record))
            .map_err(|source| RetrievalError::Embedding {
                id: record.model_id.clone(),
                source,
            })?;
        index.insert(record.model_id.clone(), vector, MODEL_TAG)?;
    }
    Ok(index)
}
