//! Positional inverted abstract indexes (token → word positions).

use std::collections::BTreeMap;

pub type InvertedIndex = BTreeMap<String, Vec<u32>>;

/// Rebuilds the abstract text. Tokens are placed at their positions and
/// joined with single spaces; unclaimed positions are skipped. When two
/// tokens claim the same position the alphabetically first wins. An empty
/// index yields `None`.
pub fn reconstruct_abstract(index: &InvertedIndex) -> Option<String> {
    let mut slots: BTreeMap<u32, &str> = BTreeMap::new();
    for (token, positions) in index {
        for &p in positions {
            slots.entry(p).or_insert(token.as_str());
        }
    }
    if slots.is_empty() {
        return None;
    }
    Some(slots.into_values().collect::<Vec<_>>().join(" "))
}

/// Builds an index from whitespace-separated tokens.
pub fn invert(text: &str) -> InvertedIndex {
    let mut index = InvertedIndex::new();
    for (i, tok) in text.split_whitespace().enumerate() {
        index.entry(tok.to_string()).or_default().push(i as u32);
    }
    index
}
