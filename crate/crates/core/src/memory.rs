//! Task memory: finished selections keyed by the embedded raw query.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{cosine, normalize, Embedder, GatewayError};
use crate::query::StructuredQuery;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("memory line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("memory entry vector has dimension {got}, store uses {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("m must be at least 1")]
    InvalidM,
    #[error(transparent)]
    Embedding(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub vector: Vec<f32>,
    pub raw_query: String,
    pub query: StructuredQuery,
    pub result_ids: Vec<String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryHit {
    pub entry: MemoryEntry,
    pub similarity: f64,
}

/// Decodes one persisted line; the vector must be finite and unit-norm.
pub fn parse_memory_line(line: &str) -> Result<MemoryEntry, String> {
    let entry: MemoryEntry = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if entry.vector.is_empty() || entry.vector.iter().any(|x| !x.is_finite()) {
        return Err("vector must be non-empty and finite".into());
    }
    let norm = entry.vector.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(format!("vector norm {norm} is not 1"));
    }
    Ok(entry)
}

/// Concurrent reads, serialized appends. Entries optionally persist to a
/// line-delimited file.
#[derive(Debug, Default)]
pub struct MemoryStore {
    entries: RwLock<Vec<MemoryEntry>>,
    sink: Option<(PathBuf, Mutex<()>)>,
}

impl MemoryStore {
    pub fn in_memory() -> Self {
        MemoryStore::default()
    }

    /// Loads `path` if it exists; later appends go to the same file.
    /// Malformed lines are skipped with a warning and counted.
    pub fn open(path: &Path) -> Result<(Self, usize), MemoryError> {
        let mut entries = Vec::new();
        let mut skipped = 0;
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match parse_memory_line(line) {
                    Ok(e) if entries.first().map_or(true, |f: &MemoryEntry| f.vector.len() == e.vector.len()) => {
                        entries.push(e)
                    }
                    Ok(_) => {
                        tracing::warn!(line = i + 1, "memory entry dimension differs; skipped");
                        skipped += 1;
                    }
                    Err(reason) => {
                        tracing::warn!(line = i + 1, %reason, "malformed memory entry skipped");
                        skipped += 1;
                    }
                }
            }
        }
        Ok((
            MemoryStore {
                entries: RwLock::new(entries),
                sink: Some((path.to_path_buf(), Mutex::new(()))),
            },
            skipped,
        ))
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> Vec<MemoryEntry> {
        self.entries.read().clone()
    }

    pub fn append(&self, mut entry: MemoryEntry) -> Result<(), MemoryError> {
        if !normalize(&mut entry.vector) {
            return Err(MemoryError::Malformed {
                line: self.len() + 1,
                reason: "zero vector".into(),
            });
        }
        let _guard = self.sink.as_ref().map(|(_, lock)| lock.lock());
        {
            let entries = self.entries.read();
            if let Some(first) = entries.first() {
                if first.vector.len() != entry.vector.len() {
                    return Err(MemoryError::DimensionMismatch {
                        expected: first.vector.len(),
                        got: entry.vector.len(),
                    });
                }
            }
        }
        if let Some((path, _)) = &self.sink {
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            let mut w = BufWriter::new(file);
            serde_json::to_writer(&mut w, &entry).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.entries.write().push(entry);
        Ok(())
    }

    /// Builds and appends an entry for a finished selection.
    pub fn remember<E: Embedder + ?Sized>(
        &self,
        embedder: &E,
        raw_query: &str,
        query: &StructuredQuery,
        result_ids: Vec<String>,
    ) -> Result<(), MemoryError> {
        let vector = embedder.embed(raw_query)?;
        self.append(MemoryEntry {
            vector,
            raw_query: raw_query.to_string(),
            query: query.clone(),
            result_ids,
            timestamp: Utc::now(),
        })
    }

    /// Top-`m` entries by cosine to `vector`, keeping those at or above
    /// `min_similarity`. Ties keep insertion order.
    pub fn recall(&self, vector: &[f32], m: usize, min_similarity: f64) -> Result<Vec<MemoryHit>, MemoryError> {
        if m == 0 {
            return Err(MemoryError::InvalidM);
        }
        let entries = self.entries.read();
        let mut hits: Vec<MemoryHit> = entries
            .iter()
            .filter(|e| e.vector.len() == vector.len())
            .map(|e| MemoryHit {
                similarity: cosine(vector, &e.vector),
                entry: e.clone(),
            })
            .filter(|h| h.similarity >= min_similarity)
            .collect();
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
        hits.truncate(m);
        Ok(hits)
    }
}

pub fn recall_memory<E: Embedder + ?Sized>(
    embedder: &E,
    store: &MemoryStore,
    raw_query: &str,
    m: usize,
    min_similarity: f64,
) -> Result<Vec<MemoryHit>, MemoryError> {
    if m == 0 {
        return Err(MemoryError::InvalidM);
    }
    if store.is_empty() {
        return Ok(Vec::new());
    }
    let vector = embedder.embed(raw_query)?;
    store.recall(&vector, m, min_similarity)
}

/// Context block injected into the ranking prompt.
pub fn format_memory_context(hits: &[MemoryHit]) -> Option<String> {
    if hits.is_empty() {
        return None;
    }
    Some(
        hits.iter()
            .map(|h| format!("- \"{}\" -> {}", h.entry.raw_query, h.entry.result_ids.join(", ")))
            .collect::<Vec<_>>()
            .join("\n"),
    )
}

/// Rewrites the whole store to `path` (used for compaction).
pub fn write_store(store: &MemoryStore, path: &Path) -> Result<(), MemoryError> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in store.entries() {
        serde_json::to_writer(&mut w, &e).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
