//! Naive reference computations. Each is a direct loop over the inputs with
//! no shared aggregation code, so pipeline outputs can be checked against it.

use std::collections::BTreeSet;

use polimatch_core::embedding::VectorStore;
use polimatch_core::matching::{CoverageRow, MatchRecord, OpportunityLabel, Scope};
use polimatch_core::model::{Tier, TierThresholds};
use polimatch_core::scholar::{filter_publications, usable_abstract, InstitutionStats, Publication};
use polimatch_core::vindex::{brute_force_search, SearchConfig};

/// Tier by straight comparison against the inclusive upper bounds.
pub fn tier_of(d: f64, t: &TierThresholds) -> Option<Tier> {
    if d <= t.green {
        Some(Tier::Green)
    } else if d <= t.yellow {
        Some(Tier::Yellow)
    } else if d <= t.orange {
        Some(Tier::Orange)
    } else if d <= t.red {
        Some(Tier::Red)
    } else {
        None
    }
}

/// Full-scan top-k per opportunity, in store order, with out-of-range hits
/// dropped.
pub fn brute_matches(opps: &VectorStore, pubs: &VectorStore, t: &TierThresholds, k: usize) -> Vec<MatchRecord> {
    let cfg = SearchConfig::new(k).expect("positive k");
    let mut out = Vec::new();
    for (i, id) in opps.ids().iter().enumerate() {
        for hit in brute_force_search(pubs, opps.row(i), cfg).expect("matching dimensions") {
            if let Some(tier) = tier_of(hit.distance, t) {
                out.push(MatchRecord {
                    opportunity_id: id.clone(),
                    publication_id: hit.record_id,
                    distance: hit.distance,
                    tier,
                });
            }
        }
    }
    out
}

/// Coverage recount: for every institution, the in-scope opportunities that
/// have a Green match authored there.
pub fn coverage_recount(
    records: &[MatchRecord],
    pubs: &[Publication],
    labels: &[OpportunityLabel],
    institutions: &[String],
    scope: Scope,
) -> Vec<CoverageRow> {
    let in_scope: Vec<&OpportunityLabel> = labels
        .iter()
        .filter(|l| match scope {
            Scope::All => true,
            Scope::Division(d) => l.cofog == d,
        })
        .collect();
    institutions
        .iter()
        .map(|inst| {
            let mut covered = 0u64;
            for label in &in_scope {
                let hit = records.iter().any(|r| {
                    r.opportunity_id == label.id
                        && r.tier == Tier::Green
                        && pubs
                            .iter()
                            .any(|p| p.id == r.publication_id && p.institution_ids.iter().any(|i| i == inst))
                });
                if hit {
                    covered += 1;
                }
            }
            let n = in_scope.len() as u64;
            CoverageRow {
                institution_id: inst.clone(),
                scope,
                n_opportunities: n,
                n_covered: covered,
                coverage_pct: 100.0 * covered as f64 / n as f64,
            }
        })
        .collect()
}

/// Publication volumes and distinct Green-matched works per institution.
pub fn stats_recount(pubs: &[Publication], records: &[MatchRecord], institutions: &[String]) -> Vec<InstitutionStats> {
    let eligible = filter_publications(pubs.to_vec());
    institutions
        .iter()
        .map(|inst| {
            let own: Vec<&Publication> = eligible.iter().filter(|p| p.institution_ids.contains(inst)).collect();
            let own_all: BTreeSet<&str> = pubs
                .iter()
                .filter(|p| p.institution_ids.contains(inst))
                .map(|p| p.id.as_str())
                .collect();
            let matched: BTreeSet<&str> = records
                .iter()
                .filter(|r| r.tier == Tier::Green && own_all.contains(r.publication_id.as_str()))
                .map(|r| r.publication_id.as_str())
                .collect();
            InstitutionStats {
                institution_id: inst.clone(),
                n_publications: own.len() as u64,
                n_with_abstracts: own.iter().filter(|p| usable_abstract(p)).count() as u64,
                n_matched: matched.len() as u64,
            }
        })
        .collect()
}
