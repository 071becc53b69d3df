//! Embedding contract, vector normalisation, and the on-disk vector store.
//!
//! Texts reach an [`Embedder`] already carrying their role prefix
//! (`[OPPORTUNITY] ` or `[SCHOLAR] `). Every vector leaving [`embed`] is
//! unit length, which makes L2 distance a monotone function of cosine
//! similarity: `‖u − v‖² = 2 − 2·cos(u, v)`.

mod mock;
mod remote;
mod store;

use std::ops::Range;

use rayon::prelude::*;
use thiserror::Error;

pub use mock::{fnv1a64, MockEmbedder};
pub use remote::RemoteEmbedder;
pub use store::{read_store, read_store_with_dim, write_store, StoreError, VectorStore, STORE_MAGIC, STORE_VERSION};

/// Dimension of every embedding in the system.
pub const EMBEDDING_DIM: usize = 1024;

/// Tolerance on `‖v‖₂ = 1` after normalisation.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Wraps raw components; the dimension must be [`EMBEDDING_DIM`].
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.len() != EMBEDDING_DIM {
            return Err(EmbedError::DimensionMismatch {
                index: 0,
                expected: EMBEDDING_DIM,
                found: values.len(),
            });
        }
        Ok(Self(values))
    }

    /// Wraps and L2-normalises.
    pub fn normalized(values: Vec<f32>) -> Result<Self, EmbedError> {
        let mut v = Self::new(values)?;
        if !normalize_in_place(&mut v.0) {
            return Err(EmbedError::ZeroVector { index: 0 });
        }
        Ok(v)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

pub fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Scales `v` to unit L2 norm. Returns `false` (leaving `v` untouched) when
/// the norm is zero or not finite.
pub fn normalize_in_place(v: &mut [f32]) -> bool {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
    true
}

/// Euclidean distance accumulated in f64.
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        acc += d * d;
    }
    acc.sqrt()
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot / (norm(a) * norm(b))
}

#[derive(Debug, Clone, Error)]
pub enum ProviderError {
    #[error("embedding provider failed: {0}")]
    Failed(String),
    #[error("provider returned malformed output: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Error)]
pub enum EmbedError {
    #[error("provider failed on texts {}..{}: {source}", .batch.start, .batch.end)]
    Provider {
        batch: Range<usize>,
        #[source]
        source: ProviderError,
    },
    #[error("text {index}: expected dimension {expected}, provider returned {found}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("provider returned {found} vectors for a batch of {expected} texts (texts {}..{})", .batch.start, .batch.end)]
    CountMismatch {
        batch: Range<usize>,
        expected: usize,
        found: usize,
    },
    #[error("text {index}: provider returned a zero or non-finite vector")]
    ZeroVector { index: usize },
}

/// A text → vector model. Implementations return raw (not necessarily
/// normalised) vectors; [`embed`] handles validation and normalisation.
pub trait Embedder: Send + Sync {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;

    /// Texts per provider call.
    fn batch_size(&self) -> usize {
        64
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        (**self).embed_batch(texts)
    }

    fn batch_size(&self) -> usize {
        (**self).batch_size()
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        (**self).embed_batch(texts)
    }

    fn batch_size(&self) -> usize {
        (**self).batch_size()
    }
}

/// Embeds `texts` in provider-sized batches (run concurrently), preserving
/// input order, and normalises each vector to unit length.
pub fn embed(texts: &[String], provider: &dyn Embedder) -> Result<Vec<EmbeddingVector>, EmbedError> {
    let batch = provider.batch_size().max(1);
    let batches: Vec<Vec<EmbeddingVector>> = texts
        .par_chunks(batch)
        .enumerate()
        .map(|(bi, chunk)| {
            let start = bi * batch;
            let range = start..start + chunk.len();
            let raw = provider.embed_batch(chunk).map_err(|source| EmbedError::Provider {
                batch: range.clone(),
                source,
            })?;
            if raw.len() != chunk.len() {
                return Err(EmbedError::CountMismatch {
                    batch: range,
                    expected: chunk.len(),
                    found: raw.len(),
                });
            }
            raw.into_iter()
                .enumerate()
                .map(|(i, mut v)| {
                    let index = start + i;
                    if v.len() != EMBEDDING_DIM {
                        return Err(EmbedError::DimensionMismatch {
                            index,
                            expected: EMBEDDING_DIM,
                            found: v.len(),
                        });
                    }
                    if !normalize_in_place(&mut v) {
                        return Err(EmbedError::ZeroVector { index });
                    }
                    Ok(EmbeddingVector(v))
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    Ok(batches.into_iter().flatten().collect())
}
