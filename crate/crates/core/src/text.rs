//! Tokenisation helpers shared by keyword extraction and the mock embedder.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

const STOPWORDS_DATA: &str = include_str!("../data/stopwords.txt");

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_DATA
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

/// Up to `limit` most frequent non-stopword tokens, ties broken alphabetically.
pub fn top_keywords(text: &str, limit: usize) -> Vec<String> {
    let stop = stopwords();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for tok in tokenize(text) {
        if !stop.contains(tok.as_str()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(limit).map(|(t, _)| t).collect()
}
