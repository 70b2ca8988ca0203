//! The knowledge base of historical anomalies and its exact cosine search.
//!
//! Entries are keyed by the embedding of their anomaly text; root cause and
//! solution ride along as payload. Search is an exhaustive scan, results are
//! ordered by score descending with ties broken by entry id ascending.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_unchecked, EmbeddingVector, TextEmbedder};
use crate::status::ReviewStatus;
use crate::util::write_atomically;

pub const DEFAULT_THRESHOLD: f64 = 0.70;
pub const DEFAULT_K: usize = 5;
pub const INDEX_FORMAT_VERSION: u32 = 1;
const INDEX_FORMAT: &str = "rcakb-index";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: index has {expected}, entry has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate entry id `{0}`")]
    DuplicateEntryId(String),
    #[error("unsupported index format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("index was built with embedder `{found}`, current embedder is `{expected}`")]
    EmbedderMismatch { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub entry_id: String,
    pub anomaly_text: String,
    pub root_cause_text: String,
    pub solution_text: String,
    pub products: Vec<String>,
    pub source_ticket_id: String,
    pub embedding: EmbeddingVector,
    #[serde(default)]
    pub status: ReviewStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entry: KbEntry,
    pub score: f64,
}

/// Result ordering: score descending, then entry id ascending.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeIndex {
    dim: usize,
    embedder_fingerprint: String,
    entries: Vec<KbEntry>,
    ids: HashMap<String, usize>,
}

/// Index shared between concurrent readers and exclusive writers.
pub type SharedIndex = Arc<RwLock<KnowledgeIndex>>;

impl KnowledgeIndex {
    pub fn new(dim: usize, embedder_fingerprint: impl Into<String>) -> Self {
        Self {
            dim,
            embedder_fingerprint: embedder_fingerprint.into(),
            entries: Vec::new(),
            ids: HashMap::new(),
        }
    }

    pub fn for_embedder(embedder: &dyn TextEmbedder) -> Self {
        Self::new(embedder.dim(), embedder.fingerprint())
    }

    pub fn into_shared(self) -> SharedIndex {
        Arc::new(RwLock::new(self))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_fingerprint(&self) -> &str {
        &self.embedder_fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn get(&self, entry_id: &str) -> Option<&KbEntry> {
        self.ids.get(entry_id).map(|&i| &self.entries[i])
    }

    pub fn add(&mut self, entry: KbEntry) -> Result<String, RetrievalError> {
        if entry.embedding.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: entry.embedding.dim(),
            });
        }
        if self.ids.contains_key(&entry.entry_id) {
            return Err(RetrievalError::DuplicateEntryId(entry.entry_id));
        }
        let id = entry.entry_id.clone();
        self.ids.insert(id.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(id)
    }

    pub fn set_status(&mut self, entry_id: &str, status: ReviewStatus) -> bool {
        match self.ids.get(entry_id) {
            Some(&i) => {
                self.entries[i].status = status;
                true
            }
            None => false,
        }
    }

    /// Embeds `query_text` with `embedder` and searches.
    pub fn retrieve(
        &self,
        query_text: &str,
        embedder: &dyn TextEmbedder,
        threshold: f64,
        k: usize,
    ) -> Vec<RetrievalResult> {
        self.retrieve_vector(&embedder.embed_text(query_text), threshold, k)
    }

    /// Up to `k` non-rejected entries scoring at least `threshold`.
    pub fn retrieve_vector(&self, query: &EmbeddingVector, threshold: f64, k: usize) -> Vec<RetrievalResult> {
        if k == 0 || query.dim() != self.dim {
            return Vec::new();
        }
        let mut hits: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.status != ReviewStatus::Rejected)
            .map(|(i, e)| (i, cosine_unchecked(query, &e.embedding)))
            .filter(|&(_, s)| s >= threshold)
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| {
            rank_order(a.1, &self.entries[a.0].entry_id, b.1, &self.entries[b.0].entry_id)
        };
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        hits.into_iter()
            .map(|(i, score)| RetrievalResult {
                entry: self.entries[i].clone(),
                score,
            })
            .collect()
    }

    /// Text form: a JSON header line followed by one JSON entry per line.
    pub fn to_text(&self) -> String {
        let header = IndexHeader {
            format: INDEX_FORMAT.into(),
            version: INDEX_FORMAT_VERSION,
            dim: self.dim,
            count: self.entries.len(),
            embedder: self.embedder_fingerprint.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a persisted index. Anything short of a complete, consistent file
    /// is an error; no partial index is ever returned.
    pub fn from_text(text: &str, expected_embedder: Option<&str>) -> Result<Self, RetrievalError> {
        let invalid = |msg: String| RetrievalError::Io(io::Error::new(io::ErrorKind::InvalidData, msg));
        let mut lines = text.split_terminator('\n');
        let header_line = lines.next().ok_or_else(|| invalid("empty index file".into()))?;
        let header: IndexHeader =
            serde_json::from_str(header_line).map_err(|e| invalid(format!("bad index header: {e}")))?;
        if header.format != INDEX_FORMAT {
            return Err(invalid(format!("not an index file: {}", header.format)));
        }
        if header.version != INDEX_FORMAT_VERSION {
            return Err(RetrievalError::FormatVersionMismatch {
                found: header.version,
                expected: INDEX_FORMAT_VERSION,
            });
        }
        if let Some(expected) = expected_embedder {
            if expected != header.embedder {
                return Err(RetrievalError::EmbedderMismatch {
                    found: header.embedder,
                    expected: expected.to_string(),
                });
            }
        }
        if !text.ends_with('\n') {
            return Err(invalid("index file is truncated".into()));
        }
        let mut index = Self::new(header.dim, header.embedder);
        for (n, line) in lines.enumerate() {
            let entry: KbEntry =
                serde_json::from_str(line).map_err(|e| invalid(format!("entry {}: {e}", n + 1)))?;
            index.add(entry)?;
        }
        if index.len() != header.count {
            return Err(invalid(format!(
                "index header announces {} entries, found {}",
                header.count,
                index.len()
            )));
        }
        Ok(index)
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        write_atomically(path.as_ref(), self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected_embedder: Option<&str>) -> Result<Self, RetrievalError> {
        Self::from_text(&fs::read_to_string(path)?, expected_embedder)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    dim: usize,
    count: usize,
    embedder: String,
}
