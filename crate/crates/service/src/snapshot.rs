//! Immutable published corpora and the validation path that builds them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use polimatch_core::analytics::{read_cofog_counts, DistributionReport};
use polimatch_core::embedding::{read_store, VectorStore};
use polimatch_core::matching::{CoverageRow, MatchRecord, OpportunityLabel, Scope};
use polimatch_core::model::{validate_thresholds, Opportunity, TierThresholds};
use polimatch_core::opportunity::{load_opportunities, read_rewrites_ndjson, InputFormat, RewrittenOpportunity};
use polimatch_core::scholar::{
    filter_publications, read_institutions, read_publications_ndjson, usable_abstract, InstitutionStats, Publication,
};
use polimatch_core::vindex::{build_index, SearchConfig, DEFAULT_K};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline;

pub const OPPORTUNITIES_FILE: &str = "opportunities.ndjson";
pub const REWRITES_FILE: &str = "rewrites.ndjson";
pub const PUBLICATIONS_FILE: &str = "publications.ndjson";
pub const OPPORTUNITY_VECTORS_FILE: &str = "opportunities.ovec";
pub const PUBLICATION_VECTORS_FILE: &str = "publications.ovec";
pub const INSTITUTIONS_FILE: &str = "institutions.csv";
pub const SETTINGS_FILE: &str = "settings.json";
pub const DATASETS_DIR: &str = "datasets";

/// Artifact names accepted in a snapshot directory or publish upload.
pub const ARTIFACTS: [&str; 7] = [
    OPPORTUNITIES_FILE,
    REWRITES_FILE,
    PUBLICATIONS_FILE,
    OPPORTUNITY_VECTORS_FILE,
    PUBLICATION_VECTORS_FILE,
    INSTITUTIONS_FILE,
    SETTINGS_FILE,
];

/// Pipeline stage that rejected a publish.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Upload,
    Settings,
    Opportunities,
    Rewrites,
    Publications,
    Vectors,
    Institutions,
    Datasets,
    Match,
    Coverage,
    Persist,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("unknown"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("publish failed at stage {stage}: {message}")]
pub struct PublishError {
    pub stage: Stage,
    pub message: String,
}

impl PublishError {
    pub fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PublishSettings {
    pub thresholds: TierThresholds,
    pub k: usize,
}

impl Default for PublishSettings {
    fn default() -> Self {
        Self {
            thresholds: TierThresholds::default(),
            k: DEFAULT_K,
        }
    }
}

/// Everything needed to build a snapshot, already parsed.
#[derive(Debug, Clone)]
pub struct PublishInputs {
    pub opportunities: Vec<Opportunity>,
    pub rewrites: Vec<RewrittenOpportunity>,
    pub publications: Vec<Publication>,
    pub opportunity_vectors: VectorStore,
    pub publication_vectors: VectorStore,
    /// Institution id to display name. When present it also fixes the set of
    /// institutions reported on.
    pub institutions: Option<BTreeMap<String, String>>,
    pub settings: PublishSettings,
    pub datasets: BTreeMap<String, DistributionReport>,
}

pub fn valid_dataset_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn open(dir: &Path, name: &str, stage: Stage) -> Result<BufReader<File>, PublishError> {
    File::open(dir.join(name))
        .map(BufReader::new)
        .map_err(|e| PublishError::new(stage, format!("{name}: {e}")))
}

impl PublishInputs {
    /// Reads the canonical artifact layout from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PublishError> {
        let settings = if dir.join(SETTINGS_FILE).exists() {
            let s: PublishSettings = serde_json::from_reader(open(dir, SETTINGS_FILE, Stage::Settings)?)
                .map_err(|e| PublishError::new(Stage::Settings, e))?;
            validate_thresholds(s.thresholds).map_err(|e| PublishError::new(Stage::Settings, e))?;
            SearchConfig::new(s.k).map_err(|e| PublishError::new(Stage::Settings, e))?;
            s
        } else {
            PublishSettings::default()
        };

        let report = load_opportunities(
            open(dir, OPPORTUNITIES_FILE, Stage::Opportunities)?,
            InputFormat::Ndjson,
            None,
        )
        .map_err(|e| PublishError::new(Stage::Opportunities, e))?;
        if let Some(first) = report.errors.first() {
            return Err(PublishError::new(
                Stage::Opportunities,
                format!("{} invalid record(s), first: {first}", report.errors.len()),
            ));
        }

        let rewrites = if dir.join(REWRITES_FILE).exists() {
            read_rewrites_ndjson(open(dir, REWRITES_FILE, Stage::Rewrites)?)
                .map_err(|e| PublishError::new(Stage::Rewrites, e))?
        } else {
            Vec::new()
        };

        let publications = read_publications_ndjson(open(dir, PUBLICATIONS_FILE, Stage::Publications)?)
            .map_err(|e| PublishError::new(Stage::Publications, e))?;

        let vectors = |name: &str| {
            read_store(&dir.join(name)).map_err(|e| PublishError::new(Stage::Vectors, format!("{name}: {e}")))
        };
        let opportunity_vectors = vectors(OPPORTUNITY_VECTORS_FILE)?;
        let publication_vectors = vectors(PUBLICATION_VECTORS_FILE)?;

        let institutions = if dir.join(INSTITUTIONS_FILE).exists() {
            let list = read_institutions(open(dir, INSTITUTIONS_FILE, Stage::Institutions)?)
                .map_err(|e| PublishError::new(Stage::Institutions, e))?;
            let mut map = BTreeMap::new();
            for i in list {
                let id = if i.openalex_id.is_empty() {
                    i.display_name.clone()
                } else {
                    i.openalex_id
                };
                map.insert(id, i.display_name);
            }
            Some(map)
        } else {
            None
        };

        let mut datasets = BTreeMap::new();
        let ds_dir = dir.join(DATASETS_DIR);
        if ds_dir.is_dir() {
            let entries = fs::read_dir(&ds_dir).map_err(|e| PublishError::new(Stage::Datasets, e))?;
            for entry in entries {
                let path = entry.map_err(|e| PublishError::new(Stage::Datasets, e))?.path();
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                if path.extension().and_then(|e| e.to_str()) != Some("csv") || !valid_dataset_name(&name) {
                    return Err(PublishError::new(
                        Stage::Datasets,
                        format!("unexpected file {}", path.display()),
                    ));
                }
                let file = File::open(&path).map_err(|e| PublishError::new(Stage::Datasets, e))?;
                let report =
                    read_cofog_counts(file).map_err(|e| PublishError::new(Stage::Datasets, format!("{name}: {e}")))?;
                datasets.insert(name, report);
            }
        }

        Ok(Self {
            opportunities: report.records,
            rewrites,
            publications,
            opportunity_vectors,
            publication_vectors,
            institutions,
            settings,
            datasets,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotCounts {
    pub opportunities: usize,
    pub publications: usize,
    pub indexed_publications: usize,
    pub matches: usize,
    pub institutions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub snapshot_id: u64,
    pub created_at: String,
    pub thresholds: TierThresholds,
    pub k: usize,
    pub counts: SnapshotCounts,
}

/// A published, read-only corpus with its derived match tables.
#[derive(Debug)]
pub struct Snapshot {
    pub meta: SnapshotMeta,
    opportunities: Vec<Opportunity>,
    by_id: HashMap<String, usize>,
    rewrites: HashMap<String, RewrittenOpportunity>,
    authorship: HashMap<String, Vec<String>>,
    matches: HashMap<String, Vec<MatchRecord>>,
    coverage: Vec<CoverageRow>,
    stats: Vec<InstitutionStats>,
    names: BTreeMap<String, String>,
    datasets: BTreeMap<String, DistributionReport>,
}

/// Validates inputs and runs matching, aggregation and coverage.
pub fn build_snapshot(inputs: PublishInputs, snapshot_id: u64, created_at: String) -> Result<Snapshot, PublishError> {
    let PublishInputs {
        mut opportunities,
        rewrites,
        publications,
        opportunity_vectors,
        publication_vectors,
        institutions,
        settings,
        datasets,
    } = inputs;

    if opportunities.is_empty() {
        return Err(PublishError::new(Stage::Opportunities, "no opportunities"));
    }
    opportunities.sort_by(|a, b| a.id.cmp(&b.id));
    let by_id: HashMap<String, usize> = opportunities
        .iter()
        .enumerate()
        .map(|(i, o)| (o.id.clone(), i))
        .collect();

    let mut rewrite_map = HashMap::new();
    for r in rewrites {
        if !by_id.contains_key(&r.opportunity_id) {
            return Err(PublishError::new(
                Stage::Rewrites,
                format!("rewrite for unknown opportunity {:?}", r.opportunity_id),
            ));
        }
        rewrite_map.insert(r.opportunity_id.clone(), r);
    }

    for id in opportunity_vectors.ids() {
        if !by_id.contains_key(id) {
            return Err(PublishError::new(
                Stage::Vectors,
                format!("vector for unknown opportunity {id:?}"),
            ));
        }
    }
    if let Some(o) = opportunities
        .iter()
        .find(|o| opportunity_vectors.position(&o.id).is_none())
    {
        return Err(PublishError::new(
            Stage::Vectors,
            format!("opportunity {:?} has no vector", o.id),
        ));
    }
    let indexable: HashSet<String> = filter_publications(publications.clone())
        .into_iter()
        .filter(usable_abstract)
        .map(|p| p.id)
        .collect();
    if let Some(id) = publication_vectors.ids().iter().find(|id| !indexable.contains(*id)) {
        return Err(PublishError::new(
            Stage::Vectors,
            format!("vector for publication {id:?} which is unknown or not eligible"),
        ));
    }

    let cfg = SearchConfig::new(settings.k).map_err(|e| PublishError::new(Stage::Settings, e))?;
    let thresholds = validate_thresholds(settings.thresholds).map_err(|e| PublishError::new(Stage::Settings, e))?;
    let indexed = publication_vectors.len();
    let index = build_index(publication_vectors).map_err(|e| PublishError::new(Stage::Vectors, e))?;
    let records = pipeline::match_store(&opportunity_vectors, &index, &thresholds, cfg)
        .map_err(|e| PublishError::new(Stage::Match, e))?;

    let institution_ids: Vec<String> = match &institutions {
        Some(map) => map.keys().cloned().collect(),
        None => pipeline::institutions_of(&publications),
    };
    let labels: Vec<OpportunityLabel> = opportunities.iter().map(OpportunityLabel::from).collect();
    let coverage = pipeline::coverage_table(
        &records,
        &publications,
        &labels,
        &institution_ids,
        &pipeline::scopes_present(&labels),
    )
    .map_err(|e| PublishError::new(Stage::Coverage, e))?;
    let stats = pipeline::institution_stats(&publications, &records, &institution_ids);
    for s in &stats {
        s.check().map_err(|e| PublishError::new(Stage::Coverage, e))?;
    }

    let mut matches: HashMap<String, Vec<MatchRecord>> = HashMap::new();
    let n_matches = records.len();
    for r in records {
        matches.entry(r.opportunity_id.clone()).or_default().push(r);
    }

    let meta = SnapshotMeta {
        snapshot_id,
        created_at,
        thresholds,
        k: cfg.k(),
        counts: SnapshotCounts {
            opportunities: opportunities.len(),
            publications: publications.len(),
            indexed_publications: indexed,
            matches: n_matches,
            institutions: institution_ids.len(),
        },
    };
    Ok(Snapshot {
        meta,
        by_id,
        rewrites: rewrite_map,
        authorship: pipeline::publication_authors(&publications),
        matches,
        coverage,
        stats,
        names: institutions.unwrap_or_default(),
        datasets,
        opportunities,
    })
}

impl Snapshot {
    pub fn id(&self) -> u64 {
        self.meta.snapshot_id
    }

    /// Opportunities sorted by id.
    pub fn opportunities(&self) -> &[Opportunity] {
        &self.opportunities
    }

    pub fn opportunity(&self, id: &str) -> Option<&Opportunity> {
        self.by_id.get(id).map(|&i| &self.opportunities[i])
    }

    pub fn rewrite(&self, id: &str) -> Option<&RewrittenOpportunity> {
        self.rewrites.get(id)
    }

    /// Records for one opportunity ordered by distance, then publication id.
    pub fn matches(&self, opportunity_id: &str) -> &[MatchRecord] {
        self.matches.get(opportunity_id).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn authorship(&self) -> &HashMap<String, Vec<String>> {
        &self.authorship
    }

    pub fn coverage(&self) -> &[CoverageRow] {
        &self.coverage
    }

    pub fn coverage_row(&self, institution_id: &str, scope: Scope) -> Option<&CoverageRow> {
        self.coverage
            .iter()
            .find(|r| r.scope == scope && r.institution_id == institution_id)
    }

    pub fn stats(&self) -> &[InstitutionStats] {
        &self.stats
    }

    pub fn institution_name(&self, id: &str) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn dataset(&self, name: &str) -> Option<&DistributionReport> {
        self.datasets.get(name)
    }

    pub fn dataset_names(&self) -> impl Iterator<Item = &str> {
        self.datasets.keys().map(String::as_str)
    }
}
