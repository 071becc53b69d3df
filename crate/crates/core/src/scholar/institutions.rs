use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::publication::{filter_publications, usable_abstract, Publication};

/// Shipped list of UK institutions (display names; ids are filled in by the
/// operator before fetching).
pub const UK_INSTITUTIONS_CSV: &str = include_str!("../../data/uk_institutions.csv");

/// Published per-institution counts for the 2020-2025 window.
pub const UK_INSTITUTION_STATS_CSV: &str = include_str!("../../data/uk_institution_stats_2020_2025.csv");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Institution {
    pub openalex_id: String,
    pub display_name: String,
    pub country: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstitutionStats {
    pub institution_id: String,
    pub n_publications: u64,
    pub n_with_abstracts: u64,
    pub n_matched: u64,
}

#[derive(Debug, Error)]
pub enum InstitutionError {
    #[error("row {row}: {message}")]
    Invalid { row: usize, message: String },
    #[error("duplicate institution {0:?}")]
    Duplicate(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl InstitutionStats {
    pub fn check(&self) -> Result<(), String> {
        if self.institution_id.trim().is_empty() {
            return Err("empty institution id".into());
        }
        if self.n_with_abstracts > self.n_publications {
            return Err(format!(
                "{}: n_with_abstracts {} exceeds n_publications {}",
                self.institution_id, self.n_with_abstracts, self.n_publications
            ));
        }
        if self.n_matched > self.n_with_abstracts {
            return Err(format!(
                "{}: n_matched {} exceeds n_with_abstracts {}",
                self.institution_id, self.n_matched, self.n_with_abstracts
            ));
        }
        Ok(())
    }
}

/// Volume counts for one institution's raw works: `n_publications` counts
/// works surviving the type/paratext/retraction filter and
/// `n_with_abstracts` those that also have a usable abstract. `n_matched`
/// starts at zero.
pub fn compute_stats(institution_id: &str, raw: Vec<Publication>) -> InstitutionStats {
    let kept = filter_publications(raw);
    InstitutionStats {
        institution_id: institution_id.to_string(),
        n_publications: kept.len() as u64,
        n_with_abstracts: kept.iter().filter(|p| usable_abstract(p)).count() as u64,
        n_matched: 0,
    }
}

pub fn read_institutions<R: Read>(source: R) -> Result<Vec<Institution>, InstitutionError> {
    let mut rdr = csv::Reader::from_reader(source);
    let mut out: Vec<Institution> = Vec::new();
    let mut names = HashSet::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let inst: Institution = rec?;
        if inst.display_name.trim().is_empty() {
            return Err(InstitutionError::Invalid {
                row: i + 1,
                message: "empty display_name".into(),
            });
        }
        if !names.insert(inst.display_name.clone()) {
            return Err(InstitutionError::Duplicate(inst.display_name));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn read_stats<R: Read>(source: R) -> Result<Vec<InstitutionStats>, InstitutionError> {
    let mut rdr = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let s: InstitutionStats = rec?;
        s.check()
            .map_err(|message| InstitutionError::Invalid { row: i + 1, message })?;
        if !ids.insert(s.institution_id.clone()) {
            return Err(InstitutionError::Duplicate(s.institution_id));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_stats<W: Write>(stats: &[InstitutionStats], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for s in stats {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn uk_institutions() -> Vec<Institution> {
    read_institutions(UK_INSTITUTIONS_CSV.as_bytes()).expect("shipped institution list is valid")
}

pub fn uk_institution_stats() -> Vec<InstitutionStats> {
    read_stats(UK_INSTITUTION_STATS_CSV.as_bytes()).expect("shipped institution stats are valid")
}
