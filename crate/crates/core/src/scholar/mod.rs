//! Publication retrieval and eligibility filtering.

mod abstract_index;
mod institutions;
mod openalex;
mod publication;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use abstract_index::{invert, reconstruct_abstract, InvertedIndex};
pub use institutions::{
    compute_stats, read_institutions, read_stats, uk_institution_stats, uk_institutions, write_stats, Institution,
    InstitutionError, InstitutionStats, UK_INSTITUTIONS_CSV, UK_INSTITUTION_STATS_CSV,
};
pub use openalex::{
    cache_path, is_institution_id, short_id, CachingTransport, FetchError, FetchedPage, OpenAlexClient, RawWork,
    TokenBucket, MAILTO_ENV, OPENALEX_BASE, START_CURSOR,
};
pub use publication::{
    compose_publication_text, filter_publications, read_publications_ndjson, usable_abstract,
    write_publications_ndjson, DocType, NoUsableAbstract, Publication, PublicationIoError, MIN_ABSTRACT_CHARS,
    SCHOLAR_PREFIX,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "(i32, i32)", into = "(i32, i32)")]
pub struct FetchWindow {
    from_year: i32,
    to_year: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("invalid fetch window: from_year {from_year} is after to_year {to_year}")]
pub struct InvalidWindow {
    pub from_year: i32,
    pub to_year: i32,
}

impl FetchWindow {
    pub fn new(from_year: i32, to_year: i32) -> Result<Self, InvalidWindow> {
        if from_year > to_year {
            return Err(InvalidWindow { from_year, to_year });
        }
        Ok(Self { from_year, to_year })
    }

    pub fn from_year(self) -> i32 {
        self.from_year
    }

    pub fn to_year(self) -> i32 {
        self.to_year
    }

    pub fn contains(self, year: i32) -> bool {
        (self.from_year..=self.to_year).contains(&year)
    }
}

impl Default for FetchWindow {
    fn default() -> Self {
        Self {
            from_year: 2020,
            to_year: 2025,
        }
    }
}

impl TryFrom<(i32, i32)> for FetchWindow {
    type Error = InvalidWindow;

    fn try_from((a, b): (i32, i32)) -> Result<Self, Self::Error> {
        Self::new(a, b)
    }
}

impl From<FetchWindow> for (i32, i32) {
    fn from(w: FetchWindow) -> Self {
        (w.from_year, w.to_year)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_window() {
        let w = FetchWindow::default();
        assert_eq!((w.from_year(), w.to_year()), (2020, 2025));
        assert!(w.contains(2020) && w.contains(2025) && !w.contains(2026));
    }

    #[test]
    fn inverted_window_rejected() {
        assert_eq!(
            FetchWindow::new(2025, 2020),
            Err(InvalidWindow {
                from_year: 2025,
                to_year: 2020
            })
        );
        assert!(FetchWindow::new(2021, 2021).is_ok());
        assert!(serde_json::from_str::<FetchWindow>("[2025,2020]").is_err());
    }
}
