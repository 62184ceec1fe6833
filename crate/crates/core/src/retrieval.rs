//! Top-K similarity search over the chunk store.
//!
//! Two retrievers sit behind [`RetrievalIndex`]: a tf-idf inverted index
//! scored by cosine similarity, and a dense index of unit-normalized
//! embeddings scored by dot product. Results are sorted by score descending
//! with ties broken by ascending chunk index, so identical inputs always give
//! identical hit lists.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MemoryStore;
use crate::llm::{LlmBackend, LlmError};

/// Default top-K for focal retrieval.
pub const DEFAULT_TOP_K: usize = 10;
pub const INDEX_FORMAT: &str = "memloop-index";
pub const INDEX_VERSION: u32 = 1;
const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding backend failed: {0}")]
    Backend(#[from] LlmError),
    #[error("embedding dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("embedding retriever needs a positive dimension")]
    ZeroDimension,
    #[error("index I/O failed for {path}: {message}")]
    Io { path: String, message: String },
    #[error("unsupported index format version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RetrieverKind {
    Lexical,
    Embedding { provider: String, dim: usize },
}

/// Lowercased alphanumeric terms; everything else separates terms.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Orders hits by score descending, then chunk index ascending.
pub fn rank_order(a: &RetrievalHit, b: &RetrievalHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.chunk_index.cmp(&b.chunk_index))
}

fn term_counts(text: &str) -> BTreeMap<String, u32> {
    let mut counts = BTreeMap::new();
    for term in tokenize(text) {
        *counts.entry(term).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalIndex {
    n_docs: usize,
    /// term -> (chunk index, term frequency), chunk indices ascending.
    postings: BTreeMap<String, Vec<(usize, u32)>>,
    #[serde(skip)]
    norms: Vec<f64>,
}

impl LexicalIndex {
    pub fn build(store: &MemoryStore) -> Self {
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        for chunk in store.chunks() {
            for (term, tf) in term_counts(&chunk.text) {
                postings.entry(term).or_default().push((chunk.index, tf));
            }
        }
        let mut index = Self {
            n_docs: store.len(),
            postings,
            norms: Vec::new(),
        };
        index.compute_norms();
        index
    }

    /// Smoothed inverse document frequency, always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map_or(0, Vec::len);
        ((1 + self.n_docs) as f64 / (1 + df) as f64).ln() + 1.0
    }

    fn compute_norms(&mut self) {
        let mut squares: Vec<Vec<f64>> = vec![Vec::new(); self.n_docs];
        for (term, list) in &self.postings {
            let idf = self.idf(term);
            for &(doc, tf) in list {
                let w = f64::from(tf) * idf;
                squares[doc].push(w * w);
            }
        }
        self.norms = squares
            .into_iter()
            .map(|sq| sq.into_iter().sum::<f64>().sqrt())
            .collect();
    }

    pub fn len(&self) -> usize {
        self.n_docs
    }

    pub fn is_empty(&self) -> bool {
        self.n_docs == 0
    }

    pub fn search(&self, query: &str, k: usize) -> Vec<RetrievalHit> {
        let qcounts: Vec<(String, f64)> = term_counts(query)
            .into_iter()
            .filter(|(t, _)| self.postings.contains_key(t))
            .map(|(t, tf)| {
                let w = f64::from(tf) * self.idf(&t);
                (t, w)
            })
            .collect();
        let qnorm = qcounts.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if qnorm == 0.0 || k == 0 {
            return Vec::new();
        }
        let mut dots: BTreeMap<usize, f64> = BTreeMap::new();
        for (term, qw) in &qcounts {
            let idf = self.idf(term);
            for &(doc, tf) in &self.postings[term] {
                *dots.entry(doc).or_insert(0.0) += qw * (f64::from(tf) * idf);
            }
        }
        let mut hits: Vec<RetrievalHit> = dots
            .into_iter()
            .map(|(doc, dot)| RetrievalHit {
                chunk_index: doc,
                score: dot / (qnorm * self.norms[doc]),
            })
            .filter(|h| h.score > 0.0)
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        hits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    provider: String,
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl EmbeddingIndex {
    pub fn build(
        store: &MemoryStore,
        provider: &str,
        dim: usize,
        backend: &dyn LlmBackend,
    ) -> Result<Self, RetrievalError> {
        if dim == 0 {
            return Err(RetrievalError::ZeroDimension);
        }
        let mut vectors = Vec::with_capacity(store.len());
        for batch in store.chunks().chunks(EMBED_BATCH) {
            let texts: Vec<String> = batch.iter().map(|c| c.text.clone()).collect();
            for v in backend.embed(&texts)? {
                if v.len() != dim {
                    return Err(RetrievalError::Dimension {
                        expected: dim,
                        found: v.len(),
                    });
                }
                vectors.push(unit(v));
            }
        }
        Ok(Self {
            provider: provider.to_string(),
            dim,
            vectors,
        })
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn search(
        &self,
        query: &str,
        k: usize,
        backend: &dyn LlmBackend,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        if self.vectors.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let q = backend
            .embed(&[query.to_string()])?
            .pop()
            .ok_or_else(|| LlmError::Malformed("empty embedding response".into()))?;
        if q.len() != self.dim {
            return Err(RetrievalError::Dimension {
                expected: self.dim,
                found: q.len(),
            });
        }
        let q = unit(q);
        let mut hits: Vec<RetrievalHit> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| RetrievalHit {
                chunk_index: i,
                score: v.iter().zip(&q).map(|(a, b)| a * b).sum(),
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RetrievalIndex {
    Lexical(LexicalIndex),
    Embedding(EmbeddingIndex),
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    index: RetrievalIndex,
}

impl RetrievalIndex {
    /// Builds an index of `kind`. `embedder` is only consulted for embedding
    /// retrievers.
    pub fn build(
        store: &MemoryStore,
        kind: &RetrieverKind,
        embedder: &dyn LlmBackend,
    ) -> Result<Self, RetrievalError> {
        Ok(match kind {
            RetrieverKind::Lexical => RetrievalIndex::Lexical(LexicalIndex::build(store)),
            RetrieverKind::Embedding { provider, dim } => {
                RetrievalIndex::Embedding(EmbeddingIndex::build(store, provider, *dim, embedder)?)
            }
        })
    }

    pub fn kind(&self) -> RetrieverKind {
        match self {
            RetrievalIndex::Lexical(_) => RetrieverKind::Lexical,
            RetrievalIndex::Embedding(e) => RetrieverKind::Embedding {
                provider: e.provider.clone(),
                dim: e.dim,
            },
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RetrievalIndex::Lexical(l) => l.len(),
            RetrievalIndex::Embedding(e) => e.vectors.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// At most `k` hits, best first.
    pub fn search(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn LlmBackend,
    ) -> Result<Vec<RetrievalHit>, RetrievalError> {
        match self {
            RetrievalIndex::Lexical(l) => Ok(l.search(query, k)),
            RetrievalIndex::Embedding(e) => e.search(query, k, embedder),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let file = IndexFile {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            index: self.clone(),
        };
        let body = serde_json::to_string(&file).expect("index serializes");
        std::fs::write(path, body).map_err(|e| RetrievalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let io = |message: String| RetrievalError::Io {
            path: path.display().to_string(),
            message,
        };
        let raw = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let file: IndexFile = serde_json::from_str(&raw).map_err(|e| io(e.to_string()))?;
        if file.format != INDEX_FORMAT {
            return Err(io(format!("unknown format {:?}", file.format)));
        }
        if file.version != INDEX_VERSION {
            return Err(RetrievalError::Version(file.version));
        }
        let mut index = file.index;
        if let RetrievalIndex::Lexical(l) = &mut index {
            l.compute_norms();
        }
        Ok(index)
    }
}
