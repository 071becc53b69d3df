//! Exact top-k nearest-neighbour search by L2 distance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{VectorStore, EMBEDDING_DIM};

pub const DEFAULT_K: usize = 100;

/// Components accumulated between early-abandon checks.
const PRUNE_STRIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSearchConfig")]
pub struct SearchConfig {
    k: usize,
}

#[derive(Deserialize)]
struct RawSearchConfig {
    k: usize,
}

impl TryFrom<RawSearchConfig> for SearchConfig {
    type Error = SearchError;

    fn try_from(raw: RawSearchConfig) -> Result<Self, Self::Error> {
        SearchConfig::new(raw.k)
    }
}

impl SearchConfig {
    pub fn new(k: usize) -> Result<Self, SearchError> {
        if k == 0 {
            return Err(SearchError::InvalidK);
        }
        Ok(Self { k })
    }

    pub fn k(self) -> usize {
        self.k
    }
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub record_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SearchError {
    #[error("cannot build an index over an empty store")]
    EmptyStore,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("query {query_index}: dimension mismatch (expected {expected}, found {found})")]
    BatchDimension {
        query_index: usize,
        expected: usize,
        found: usize,
    },
}

/// Flat exact index. Immutable after construction and safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    store: VectorStore,
}

pub fn build_index(store: VectorStore) -> Result<FlatIndex, SearchError> {
    if store.is_empty() {
        return Err(SearchError::EmptyStore);
    }
    if store.dim() != EMBEDDING_DIM {
        return Err(SearchError::DimensionMismatch {
            expected: EMBEDDING_DIM,
            found: store.dim(),
        });
    }
    Ok(FlatIndex { store })
}

#[derive(Clone, Copy)]
struct Candidate<'a> {
    distance: f64,
    id: &'a str,
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

/// Bounded max-heap keeping the k best candidates seen so far.
struct TopK<'a> {
    k: usize,
    heap: BinaryHeap<Candidate<'a>>,
}

impl<'a> TopK<'a> {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    /// Current k-th best distance once the heap is full.
    fn bound(&self) -> Option<f64> {
        (self.heap.len() == self.k)
            .then(|| self.heap.peek().map(|c| c.distance))
            .flatten()
    }

    fn offer(&mut self, c: Candidate<'a>) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if c < *worst {
                *worst = c;
            }
        }
    }

    fn merge(mut self, other: TopK<'a>) -> Self {
        for c in other.heap {
            self.offer(c);
        }
        self
    }
}

/// Sequential f64 accumulation of squared differences, abandoning once the
/// partial distance strictly exceeds `bound`. Returns the full L2 distance
/// otherwise; the value is bit-identical to an unpruned scan.
fn pruned_distance(row: &[f32], query: &[f32], bound: Option<f64>) -> Option<f64> {
    let mut acc = 0.0f64;
    for (start, (r, q)) in row.chunks(PRUNE_STRIDE).zip(query.chunks(PRUNE_STRIDE)).enumerate() {
        for i in 0..r.len() {
            let d = r[i] as f64 - q[i] as f64;
            acc += d * d;
        }
        if let Some(b) = bound {
            if (start + 1) * PRUNE_STRIDE < row.len() && acc.sqrt() > b {
                return None;
            }
        }
    }
    let dist = acc.sqrt();
    match bound {
        Some(b) if dist > b => None,
        _ => Some(dist),
    }
}

fn check_dim(expected: usize, query: &[f32]) -> Result<(), SearchError> {
    if query.len() != expected {
        return Err(SearchError::DimensionMismatch {
            expected,
            found: query.len(),
        });
    }
    Ok(())
}

impl FlatIndex {
    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn store(&self) -> &VectorStore {
        &self.store
    }

    /// Exactly `min(k, len)` hits ordered by `(distance, record_id)`.
    pub fn search(&self, query: &[f32], cfg: SearchConfig) -> Result<Vec<SearchHit>, SearchError> {
        check_dim(self.dim(), query)?;
        let k = cfg.k().min(self.len());
        let ids = self.store.ids();
        let top = (0..self.len())
            .into_par_iter()
            .with_min_len(256)
            .fold(
                || TopK::new(k),
                |mut top, row| {
                    if let Some(distance) = pruned_distance(self.store.row(row), query, top.bound()) {
                        top.offer(Candidate {
                            distance,
                            id: &ids[row],
                        });
                    }
                    top
                },
            )
            .reduce(|| TopK::new(k), TopK::merge);
        Ok(top
            .heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| SearchHit {
                record_id: c.id.to_string(),
                distance: c.distance,
            })
            .collect())
    }

    /// Element `i` equals `search(queries[i])`.
    pub fn batch_search<Q: AsRef<[f32]> + Sync>(
        &self,
        queries: &[Q],
        cfg: SearchConfig,
    ) -> Result<Vec<Vec<SearchHit>>, SearchError> {
        for (query_index, q) in queries.iter().enumerate() {
            if q.as_ref().len() != self.dim() {
                return Err(SearchError::BatchDimension {
                    query_index,
                    expected: self.dim(),
                    found: q.as_ref().len(),
                });
            }
        }
        queries.par_iter().map(|q| self.search(q.as_ref(), cfg)).collect()
    }
}

/// Reference full scan: every distance computed, then sorted by
/// `(distance, record_id)` and truncated.
pub fn brute_force_search(
    store: &VectorStore,
    query: &[f32],
    cfg: SearchConfig,
) -> Result<Vec<SearchHit>, SearchError> {
    check_dim(store.dim(), query)?;
    let mut all: Vec<SearchHit> = (0..store.len())
        .map(|r| {
            let row = store.row(r);
            let mut acc = 0.0f64;
            for i in 0..row.len() {
                let d = row[i] as f64 - query[i] as f64;
                acc += d * d;
            }
            SearchHit {
                record_id: store.ids()[r].clone(),
                distance: acc.sqrt(),
            }
        })
        .collect();
    all.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.record_id.cmp(&b.record_id))
    });
    all.truncate(cfg.k());
    Ok(all)
}
