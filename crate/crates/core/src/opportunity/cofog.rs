//! COFOG division assignment.

use thiserror::Error;

use crate::embedding::{embed, l2_distance, EmbedError, Embedder, EmbeddingVector};
use crate::model::CofogDivision;

const SEED_DATA: &str = include_str!("../../data/cofog_seeds.tsv");

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("cannot classify empty text")]
    EmptyText,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("invalid seed data: {0}")]
    Seeds(String),
}

pub trait CofogClassifier: Send + Sync {
    fn classify(&self, text: &str) -> Result<CofogDivision, ClassifyError>;
}

/// One seed paragraph per division, as shipped with the crate.
pub fn default_seeds() -> Vec<(CofogDivision, String)> {
    SEED_DATA
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (code, text) = l.split_once('\t').expect("seed line has a tab");
            let div = code.parse().expect("seed code is a COFOG code");
            (div, text.to_string())
        })
        .collect()
}

/// Nearest-centroid classifier over embedded seed descriptions. Each
/// division's centroid is the (normalised) embedding of its seed text; ties
/// go to the lowest division code.
pub struct CentroidClassifier<E> {
    embedder: E,
    centroids: Vec<(CofogDivision, EmbeddingVector)>,
}

impl<E: Embedder> CentroidClassifier<E> {
    pub fn new(embedder: E) -> Result<Self, ClassifyError> {
        Self::from_seeds(embedder, default_seeds())
    }

    pub fn from_seeds(embedder: E, mut seeds: Vec<(CofogDivision, String)>) -> Result<Self, ClassifyError> {
        if seeds.is_empty() {
            return Err(ClassifyError::Seeds("no seed paragraphs".into()));
        }
        seeds.sort_by_key(|(d, _)| *d);
        if seeds.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(ClassifyError::Seeds("duplicate division".into()));
        }
        let texts: Vec<String> = seeds.iter().map(|(_, t)| t.clone()).collect();
        let vectors = embed(&texts, &embedder)?;
        let centroids = seeds.into_iter().map(|(d, _)| d).zip(vectors).collect();
        Ok(Self { embedder, centroids })
    }

    /// Distance from `text` to each centroid, in division-code order.
    pub fn distances(&self, text: &str) -> Result<Vec<(CofogDivision, f64)>, ClassifyError> {
        let v = embed(&[text.to_string()], &self.embedder)?.remove(0);
        Ok(self
            .centroids
            .iter()
            .map(|(d, c)| (*d, l2_distance(v.as_slice(), c.as_slice())))
            .collect())
    }
}

impl<E: Embedder> CofogClassifier for CentroidClassifier<E> {
    fn classify(&self, text: &str) -> Result<CofogDivision, ClassifyError> {
        let dists = self.distances(text)?;
        // Strict `<` keeps the earliest (lowest-code) division on ties.
        let mut best = dists[0];
        for &(d, dist) in &dists[1..] {
            if dist < best.1 {
                best = (d, dist);
            }
        }
        Ok(best.0)
    }
}

/// Assigns a division. A manual label always wins and the classifier is not
/// consulted.
pub fn classify_cofog(
    text: &str,
    manual: Option<CofogDivision>,
    classifier: &dyn CofogClassifier,
) -> Result<CofogDivision, ClassifyError> {
    if let Some(label) = manual {
        return Ok(label);
    }
    if text.trim().is_empty() {
        return Err(ClassifyError::EmptyText);
    }
    classifier.classify(text)
}
