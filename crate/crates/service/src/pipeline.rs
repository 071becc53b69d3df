//! Matching and aggregation steps shared by the batch CLI and the publish
//! path, so both produce identical numbers from identical inputs.

use std::collections::{BTreeSet, HashMap};

use polimatch_core::embedding::VectorStore;
use polimatch_core::matching::{
    aggregate_institution, coverage, dedupe_records, match_all, matched_publication_counts, CoverageRow, MatchError,
    MatchRecord, OpportunityLabel, Scope,
};
use polimatch_core::model::{CofogDivision, TierThresholds};
use polimatch_core::scholar::{compute_stats, InstitutionStats, Publication};
use polimatch_core::vindex::{FlatIndex, SearchConfig};

/// Top-k retrieval for every opportunity vector, tiered and de-duplicated.
pub fn match_store(
    opportunity_vectors: &VectorStore,
    index: &FlatIndex,
    thresholds: &TierThresholds,
    cfg: SearchConfig,
) -> Result<Vec<MatchRecord>, MatchError> {
    let queries: Vec<(String, &[f32])> = opportunity_vectors
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), opportunity_vectors.row(i)))
        .collect();
    let records = match_all(&queries, index, thresholds, cfg)?;
    Ok(dedupe_records(&records))
}

pub fn publication_institutions(pubs: &[Publication]) -> HashMap<String, Vec<String>> {
    pubs.iter().map(|p| (p.id.clone(), p.institution_ids.clone())).collect()
}

pub fn publication_authors(pubs: &[Publication]) -> HashMap<String, Vec<String>> {
    pubs.iter().map(|p| (p.id.clone(), p.author_ids.clone())).collect()
}

/// Every institution id seen on any publication, sorted.
pub fn institutions_of(pubs: &[Publication]) -> Vec<String> {
    let ids: BTreeSet<&String> = pubs.iter().flat_map(|p| &p.institution_ids).collect();
    ids.into_iter().cloned().collect()
}

/// Volume counts per institution with `n_matched` set to the number of
/// distinct Green-matched works.
pub fn institution_stats(
    pubs: &[Publication],
    records: &[MatchRecord],
    institutions: &[String],
) -> Vec<InstitutionStats> {
    let matched = matched_publication_counts(records, &publication_institutions(pubs), true);
    institutions
        .iter()
        .map(|inst| {
            let own: Vec<Publication> = pubs
                .iter()
                .filter(|p| p.institution_ids.contains(inst))
                .cloned()
                .collect();
            let mut s = compute_stats(inst, own);
            s.n_matched = matched.get(inst).copied().unwrap_or(0);
            s
        })
        .collect()
}

/// The scopes with at least one opportunity: `all` first, then divisions in
/// code order.
pub fn scopes_present(labels: &[OpportunityLabel]) -> Vec<Scope> {
    let divisions: BTreeSet<CofogDivision> = labels.iter().map(|l| l.cofog).collect();
    std::iter::once(Scope::All)
        .chain(divisions.into_iter().map(Scope::Division))
        .collect()
}

/// Coverage rows for each requested scope, in scope then institution order.
pub fn coverage_table(
    records: &[MatchRecord],
    pubs: &[Publication],
    labels: &[OpportunityLabel],
    institutions: &[String],
    scopes: &[Scope],
) -> Result<Vec<CoverageRow>, MatchError> {
    let agg = aggregate_institution(records, &publication_institutions(pubs));
    let mut rows = Vec::new();
    for &scope in scopes {
        rows.extend(coverage(&agg, labels, scope, institutions)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use polimatch_core::matching::TierOutcome;
    use polimatch_core::model::Tier;
    use polimatch_core::scholar::DocType;

    fn publication(id: &str, insts: &[&str], abstract_text: Option<&str>) -> Publication {
        Publication {
            id: id.into(),
            title: format!("title {id}"),
            abstract_text: abstract_text.map(String::from),
            year: 2022,
            doc_type: DocType::JournalArticle,
            author_ids: vec![format!("A{id}")],
            institution_ids: insts.iter().map(|s| s.to_string()).collect(),
            is_paratext: false,
            is_retracted: false,
        }
    }

    fn record(opp: &str, publ: &str, d: f64) -> MatchRecord {
        let tier = match polimatch_core::matching::classify_tier(d, &TierThresholds::default()).unwrap() {
            TierOutcome::Tier(t) => t,
            TierOutcome::Excluded => panic!("excluded"),
        };
        MatchRecord {
            opportunity_id: opp.into(),
            publication_id: publ.into(),
            distance: d,
            tier,
        }
    }

    const ABS: Option<&str> = Some("An abstract comfortably longer than twenty characters.");

    #[test]
    fn stats_count_green_matched_works_once() {
        let pubs = vec![
            publication("W1", &["I1", "I2"], ABS),
            publication("W2", &["I1"], ABS),
            publication("W3", &["I2"], None),
        ];
        let records = vec![
            record("o1", "W1", 0.1),
            record("o2", "W1", 0.2),
            record("o1", "W2", 0.30),
        ];
        assert_eq!(records[2].tier, Tier::Yellow);
        let insts = institutions_of(&pubs);
        assert_eq!(insts, ["I1", "I2"]);
        let stats = institution_stats(&pubs, &records, &insts);
        assert_eq!(
            (stats[0].n_publications, stats[0].n_with_abstracts, stats[0].n_matched),
            (2, 2, 1)
        );
        assert_eq!(
            (stats[1].n_publications, stats[1].n_with_abstracts, stats[1].n_matched),
            (2, 1, 1)
        );
        assert!(stats.iter().all(|s| s.check().is_ok()));
    }

    #[test]
    fn coverage_table_lists_all_then_divisions() {
        let pubs = vec![publication("W1", &["I1"], ABS)];
        let labels = vec![
            OpportunityLabel {
                id: "o1".into(),
                cofog: CofogDivision::Health,
            },
            OpportunityLabel {
                id: "o2".into(),
                cofog: CofogDivision::Defence,
            },
        ];
        let scopes = scopes_present(&labels);
        assert_eq!(
            scopes,
            [
                Scope::All,
                Scope::Division(CofogDivision::Defence),
                Scope::Division(CofogDivision::Health)
            ]
        );
        let rows = coverage_table(&[record("o1", "W1", 0.2)], &pubs, &labels, &["I1".into()], &scopes).unwrap();
        let pcts: Vec<f64> = rows.iter().map(|r| r.coverage_pct).collect();
        assert_eq!(pcts, [50.0, 0.0, 100.0]);
    }
}
