//! Tier classification, opportunity matching, researcher ranking and
//! institution coverage.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{CofogDivision, Opportunity, Tier, TierThresholds};
use crate::vindex::{FlatIndex, SearchConfig, SearchError, SearchHit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TierOutcome {
    Tier(Tier),
    Excluded,
}

impl TierOutcome {
    pub fn tier(self) -> Option<Tier> {
        match self {
            TierOutcome::Tier(t) => Some(t),
            TierOutcome::Excluded => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("publication {0:?} has no authorship entry")]
    UnknownPublication(String),
    #[error("no opportunities in scope {0}")]
    EmptyScope(Scope),
    #[error("invalid match row {line}: {message}")]
    InvalidRow { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Each tier's upper bound is inclusive; anything beyond `red` is excluded.
pub fn classify_tier(distance: f64, t: &TierThresholds) -> Result<TierOutcome, MatchError> {
    if !(distance >= 0.0) {
        return Err(MatchError::NegativeDistance(distance));
    }
    Ok(Tier::ALL
        .into_iter()
        .find(|&tier| distance <= t.bound(tier))
        .map_or(TierOutcome::Excluded, TierOutcome::Tier))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub opportunity_id: String,
    pub publication_id: String,
    pub distance: f64,
    pub tier: Tier,
}

fn records_from_hits(
    opportunity_id: &str,
    hits: Vec<SearchHit>,
    t: &TierThresholds,
) -> Result<Vec<MatchRecord>, MatchError> {
    let mut out = Vec::new();
    for h in hits {
        if let TierOutcome::Tier(tier) = classify_tier(h.distance, t)? {
            out.push(MatchRecord {
                opportunity_id: opportunity_id.to_string(),
                publication_id: h.record_id,
                distance: h.distance,
                tier,
            });
        }
    }
    Ok(out)
}

/// Top-k retrieval for one opportunity, keeping hits inside the Red bound in
/// hit order.
pub fn match_opportunity(
    opportunity_id: &str,
    opp_vector: &[f32],
    index: &FlatIndex,
    t: &TierThresholds,
    cfg: SearchConfig,
) -> Result<Vec<MatchRecord>, MatchError> {
    let hits = index.search(opp_vector, cfg)?;
    records_from_hits(opportunity_id, hits, t)
}

/// Matches many opportunities; output is grouped per opportunity in input
/// order.
pub fn match_all<Q: AsRef<[f32]> + Sync>(
    opportunities: &[(String, Q)],
    index: &FlatIndex,
    t: &TierThresholds,
    cfg: SearchConfig,
) -> Result<Vec<MatchRecord>, MatchError> {
    let queries: Vec<&[f32]> = opportunities.iter().map(|(_, v)| v.as_ref()).collect();
    let batches = index.batch_search(&queries, cfg)?;
    let mut out = Vec::new();
    for ((id, _), hits) in opportunities.iter().zip(batches) {
        out.extend(records_from_hits(id, hits, t)?);
    }
    Ok(out)
}

/// Collapses repeated (opportunity, publication) pairs to the smallest
/// distance. Output is sorted by opportunity, distance, publication.
pub fn dedupe_records(records: &[MatchRecord]) -> Vec<MatchRecord> {
    let mut best: HashMap<(&str, &str), &MatchRecord> = HashMap::new();
    for r in records {
        best.entry((&r.opportunity_id, &r.publication_id))
            .and_modify(|cur| {
                if r.distance < cur.distance {
                    *cur = r;
                }
            })
            .or_insert(r);
    }
    let mut out: Vec<MatchRecord> = best.into_values().cloned().collect();
    out.sort_by(|a, b| {
        a.opportunity_id
            .cmp(&b.opportunity_id)
            .then(a.distance.total_cmp(&b.distance))
            .then_with(|| a.publication_id.cmp(&b.publication_id))
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResearcher {
    pub author_id: String,
    pub matched_work_count: u32,
    pub best_distance: f64,
    pub rank: u32,
}

/// Ranks authors of one opportunity's matched works by number of matched
/// works, then best distance, then author id.
pub fn rank_researchers(
    records: &[MatchRecord],
    authorship: &HashMap<String, Vec<String>>,
) -> Result<Vec<RankedResearcher>, MatchError> {
    let mut per_pub: BTreeMap<&str, f64> = BTreeMap::new();
    for r in records {
        let d = per_pub.entry(&r.publication_id).or_insert(r.distance);
        if r.distance < *d {
            *d = r.distance;
        }
    }
    let mut per_author: HashMap<&str, (u32, f64)> = HashMap::new();
    for (pub_id, dist) in per_pub {
        let authors = authorship
            .get(pub_id)
            .ok_or_else(|| MatchError::UnknownPublication(pub_id.to_string()))?;
        let unique: BTreeSet<&str> = authors.iter().map(String::as_str).collect();
        for a in unique {
            let e = per_author.entry(a).or_insert((0, f64::INFINITY));
            e.0 += 1;
            if dist < e.1 {
                e.1 = dist;
            }
        }
    }
    let mut ranked: Vec<(&str, u32, f64)> = per_author.into_iter().map(|(a, (c, d))| (a, c, d)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then_with(|| a.0.cmp(b.0)));
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(i, (a, c, d))| RankedResearcher {
            author_id: a.to_string(),
            matched_work_count: c,
            best_distance: d,
            rank: i as u32 + 1,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounts {
    pub green: u64,
    pub yellow: u64,
    pub orange: u64,
    pub red: u64,
}

impl TierCounts {
    pub fn get(&self, tier: Tier) -> u64 {
        match tier {
            Tier::Green => self.green,
            Tier::Yellow => self.yellow,
            Tier::Orange => self.orange,
            Tier::Red => self.red,
        }
    }

    fn bump(&mut self, tier: Tier) {
        match tier {
            Tier::Green => self.green += 1,
            Tier::Yellow => self.yellow += 1,
            Tier::Orange => self.orange += 1,
            Tier::Red => self.red += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.green + self.yellow + self.orange + self.red
    }
}

/// Tier counts keyed by (institution, opportunity).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstitutionAggregate {
    counts: BTreeMap<(String, String), TierCounts>,
}

impl InstitutionAggregate {
    pub fn get(&self, institution_id: &str, opportunity_id: &str) -> TierCounts {
        self.counts
            .get(&(institution_id.to_string(), opportunity_id.to_string()))
            .copied()
            .unwrap_or_default()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, TierCounts)> {
        self.counts.iter().map(|((i, o), c)| (i.as_str(), o.as_str(), *c))
    }

    pub fn institutions(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.counts.keys().map(|(i, _)| i).collect();
        set.into_iter().cloned().collect()
    }
}

/// Counts tiers per (institution, opportunity). Duplicate pairs count once and
/// a publication with several affiliations counts for each of them.
pub fn aggregate_institution(
    records: &[MatchRecord],
    pub_institutions: &HashMap<String, Vec<String>>,
) -> InstitutionAggregate {
    let mut agg = InstitutionAggregate::default();
    for r in dedupe_records(records) {
        let Some(insts) = pub_institutions.get(&r.publication_id) else {
            continue;
        };
        let unique: BTreeSet<&String> = insts.iter().collect();
        for inst in unique {
            agg.counts
                .entry((inst.clone(), r.opportunity_id.clone()))
                .or_default()
                .bump(r.tier);
        }
    }
    agg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    All,
    Division(CofogDivision),
}

impl Scope {
    pub fn includes(self, cofog: CofogDivision) -> bool {
        match self {
            Scope::All => true,
            Scope::Division(d) => d == cofog,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::All => f.write_str("all"),
            Scope::Division(d) => f.write_str(&d.code_str()),
        }
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Scope::All);
        }
        s.parse::<CofogDivision>()
            .map(Scope::Division)
            .map_err(|e| e.to_string())
    }
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Minimal opportunity view used for coverage denominators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpportunityLabel {
    pub id: String,
    pub cofog: CofogDivision,
}

impl From<&Opportunity> for OpportunityLabel {
    fn from(o: &Opportunity) -> Self {
        Self {
            id: o.id.clone(),
            cofog: o.cofog,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub institution_id: String,
    pub scope: Scope,
    pub n_opportunities: u64,
    pub n_covered: u64,
    pub coverage_pct: f64,
}

fn in_scope(opportunities: &[OpportunityLabel], scope: Scope) -> Result<BTreeSet<&str>, MatchError> {
    let ids: BTreeSet<&str> = opportunities
        .iter()
        .filter(|o| scope.includes(o.cofog))
        .map(|o| o.id.as_str())
        .collect();
    if ids.is_empty() {
        return Err(MatchError::EmptyScope(scope));
    }
    Ok(ids)
}

/// Share of in-scope opportunities with at least one Green match, per
/// institution. Scope uses each opportunity's stored division.
pub fn coverage(
    agg: &InstitutionAggregate,
    opportunities: &[OpportunityLabel],
    scope: Scope,
    institutions: &[String],
) -> Result<Vec<CoverageRow>, MatchError> {
    let ids = in_scope(opportunities, scope)?;
    let n = ids.len() as u64;
    Ok(institutions
        .iter()
        .map(|inst| {
            let covered = ids.iter().filter(|o| agg.get(inst, o).green >= 1).count() as u64;
            CoverageRow {
                institution_id: inst.clone(),
                scope,
                n_opportunities: n,
                n_covered: covered,
                coverage_pct: 100.0 * covered as f64 / n as f64,
            }
        })
        .collect())
}

/// Percentage of opportunities with a Green match from any institution.
pub fn opportunity_coverage(records: &[MatchRecord], opportunities: &[OpportunityLabel]) -> Result<f64, MatchError> {
    let ids = in_scope(opportunities, Scope::All)?;
    let green: BTreeSet<&str> = records
        .iter()
        .filter(|r| r.tier == Tier::Green)
        .map(|r| r.opportunity_id.as_str())
        .collect();
    let covered = ids.iter().filter(|o| green.contains(*o)).count();
    Ok(100.0 * covered as f64 / ids.len() as f64)
}

/// Distinct publications per institution with at least one match in the
/// qualifying tiers (Green only when `green_only`).
pub fn matched_publication_counts(
    records: &[MatchRecord],
    pub_institutions: &HashMap<String, Vec<String>>,
    green_only: bool,
) -> BTreeMap<String, u64> {
    let matched: BTreeSet<&str> = records
        .iter()
        .filter(|r| !green_only || r.tier == Tier::Green)
        .map(|r| r.publication_id.as_str())
        .collect();
    let mut per_inst: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for p in matched {
        if let Some(insts) = pub_institutions.get(p) {
            for i in insts {
                per_inst.entry(i.clone()).or_default().insert(p);
            }
        }
    }
    per_inst.into_iter().map(|(i, s)| (i, s.len() as u64)).collect()
}

pub fn write_matches_csv<W: Write>(records: &[MatchRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["opportunity_id", "publication_id", "distance", "tier"])?;
    for r in records {
        w.write_record([
            r.opportunity_id.as_str(),
            r.publication_id.as_str(),
            &format!("{:.6}", r.distance),
            r.tier.name(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct MatchRow {
    opportunity_id: String,
    publication_id: String,
    distance: f64,
    tier: String,
}

pub fn read_matches_csv<R: Read>(source: R) -> Result<Vec<MatchRecord>, MatchError> {
    let mut rdr = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<MatchRow>().enumerate() {
        let row = row?;
        let line = i + 2;
        let tier = row
            .tier
            .parse()
            .map_err(|e: crate::model::ParseEnumError| MatchError::InvalidRow {
                line,
                message: e.to_string(),
            })?;
        if !(row.distance >= 0.0) {
            return Err(MatchError::InvalidRow {
                line,
                message: format!("negative distance {}", row.distance),
            });
        }
        out.push(MatchRecord {
            opportunity_id: row.opportunity_id,
            publication_id: row.publication_id,
            distance: row.distance,
            tier,
        });
    }
    Ok(out)
}

pub fn write_coverage_csv<W: Write>(rows: &[CoverageRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "institution_id",
        "scope",
        "n_opportunities",
        "n_covered",
        "coverage_pct",
    ])?;
    for r in rows {
        w.write_record([
            r.institution_id.clone(),
            r.scope.to_string(),
            r.n_opportunities.to_string(),
            r.n_covered.to_string(),
            format!("{:.1}", r.coverage_pct),
        ])?;
    }
    w.flush()?;
    Ok(())
}
