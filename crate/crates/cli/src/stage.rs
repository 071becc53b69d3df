//! Stage identities, artifact names and the summary chain that ties each
//! stage's inputs to the configuration that produced them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const OPPORTUNITIES: &str = "opportunities.ndjson";
pub const REWRITES: &str = "rewrites.ndjson";
pub const PUBLICATIONS: &str = "publications.ndjson";
pub const INSTITUTIONS: &str = "institutions.csv";
pub const OPPORTUNITY_VECTORS: &str = "opportunities.ovec";
pub const PUBLICATION_VECTORS: &str = "publications.ovec";
pub const INDEX: &str = "index.json";
pub const MATCHES: &str = "matches.csv";
pub const MATCHES_RAW: &str = "matches.ndjson";
pub const RESEARCHERS: &str = "researchers.csv";
pub const COVERAGE: &str = "coverage.csv";
pub const COVERAGE_RAW: &str = "coverage.ndjson";
pub const STATS: &str = "institution_stats.csv";
pub const REPORTS_DIR: &str = "reports";
pub const CALIBRATION_DIR: &str = "calibration";
pub const SUMMARIES_DIR: &str = "summaries";
pub const DIAGNOSTICS_DIR: &str = "diagnostics";
pub const FETCH_DIR: &str = "fetch";
pub const CACHE_DIR: &str = "cache";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    IngestOpps,
    FetchOpenalex,
    Rewrite,
    Embed,
    BuildIndex,
    Match,
    Rank,
    Coverage,
    Report,
    Calibrate,
    Serve,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::IngestOpps,
        Stage::FetchOpenalex,
        Stage::Rewrite,
        Stage::Embed,
        Stage::BuildIndex,
        Stage::Match,
        Stage::Rank,
        Stage::Coverage,
        Stage::Report,
        Stage::Calibrate,
        Stage::Serve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::IngestOpps => "ingest-opps",
            Stage::FetchOpenalex => "fetch-openalex",
            Stage::Rewrite => "rewrite",
            Stage::Embed => "embed",
            Stage::BuildIndex => "build-index",
            Stage::Match => "match",
            Stage::Rank => "rank",
            Stage::Coverage => "coverage",
            Stage::Report => "report",
            Stage::Calibrate => "calibrate",
            Stage::Serve => "serve",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::IngestOpps | Stage::FetchOpenalex | Stage::Calibrate => &[],
            Stage::Rewrite => &[Stage::IngestOpps],
            Stage::Embed => &[Stage::Rewrite, Stage::FetchOpenalex],
            Stage::BuildIndex => &[Stage::Embed],
            Stage::Match => &[Stage::Embed, Stage::BuildIndex],
            Stage::Rank => &[Stage::Match, Stage::FetchOpenalex],
            Stage::Coverage => &[Stage::Match, Stage::FetchOpenalex, Stage::IngestOpps],
            Stage::Report => &[Stage::Coverage, Stage::IngestOpps],
            Stage::Serve => &[Stage::Match, Stage::Rewrite],
        }
    }

    /// This stage and everything it transitively reads from, sorted.
    pub fn closure(self) -> Vec<Stage> {
        let mut out = vec![self];
        let mut i = 0;
        while i < out.len() {
            for &u in out[i].upstream() {
                if !out.contains(&u) {
                    out.push(u);
                }
            }
            i += 1;
        }
        out.sort();
        out
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Machine-readable record written after every successful stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub config_hash: String,
    pub forced: bool,
    pub counts: BTreeMap<String, u64>,
    pub timings_ms: BTreeMap<String, u64>,
    /// Relative path to SHA-256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Relative path to SHA-256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn summary_path(data_dir: &Path, stage: Stage) -> std::path::PathBuf {
    data_dir.join(SUMMARIES_DIR).join(format!("{}.json", stage.name()))
}

pub fn read_summary(data_dir: &Path, stage: Stage) -> Result<Option<StageSummary>, CliError> {
    let path = summary_path(data_dir, stage);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Internal(format!("corrupt summary {}: {e}", path.display())))
}

/// Writes through a temporary file so readers never see a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Verifies each input exists and, when an upstream stage recorded it,
/// that it was produced under the current configuration and has not
/// changed since. Returns the input digests.
pub fn check_inputs(
    cfg: &RunConfig,
    stage: Stage,
    inputs: &[&str],
    force: bool,
) -> Result<BTreeMap<String, String>, CliError> {
    let mut upstream = Vec::new();
    for s in stage.closure().into_iter().filter(|&s| s != stage) {
        if let Some(summary) = read_summary(&cfg.data_dir, s)? {
            upstream.push(summary);
        }
    }
    let mut digests = BTreeMap::new();
    for &name in inputs {
        let path = cfg.data_dir.join(name);
        if !path.is_file() {
            let producer = stage
                .closure()
                .into_iter()
                .find(|s| produces(*s, name))
                .map(|s| format!("; run `polimatch {s}` first"))
                .unwrap_or_default();
            return Err(CliError::Usage(format!("missing input {}{producer}", path.display())));
        }
        let digest = file_digest(&path)?;
        if let Some(summary) = upstream.iter().find(|s| s.outputs.contains_key(name)) {
            let expected = cfg.stage_hash(summary.stage);
            if summary.config_hash != expected && !force {
                return Err(CliError::ConfigMismatch {
                    stage,
                    upstream: summary.stage,
                    input: name.to_string(),
                });
            }
            if summary.outputs[name] != digest && !force {
                return Err(CliError::StaleInput {
                    stage,
                    upstream: summary.stage,
                    input: name.to_string(),
                });
            }
        }
        digests.insert(name.to_string(), digest);
    }
    Ok(digests)
}

fn produces(stage: Stage, artifact: &str) -> bool {
    match stage {
        Stage::IngestOpps => artifact == OPPORTUNITIES,
        Stage::FetchOpenalex => artifact == PUBLICATIONS || artifact == INSTITUTIONS,
        Stage::Rewrite => artifact == REWRITES,
        Stage::Embed => artifact == OPPORTUNITY_VECTORS || artifact == PUBLICATION_VECTORS,
        Stage::BuildIndex => artifact == INDEX,
        Stage::Match => artifact == MATCHES || artifact == MATCHES_RAW,
        Stage::Rank => artifact == RESEARCHERS,
        Stage::Coverage => [COVERAGE, COVERAGE_RAW, STATS].contains(&artifact),
        Stage::Report | Stage::Calibrate | Stage::Serve => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closure_walks_the_stage_graph() {
        assert_eq!(Stage::IngestOpps.closure(), [Stage::IngestOpps]);
        assert_eq!(
            Stage::Match.closure(),
            [
                Stage::IngestOpps,
                Stage::FetchOpenalex,
                Stage::Rewrite,
                Stage::Embed,
                Stage::BuildIndex,
                Stage::Match
            ]
        );
        assert!(Stage::Report.closure().contains(&Stage::Match));
    }

    #[test]
    fn names_match_serde() {
        for s in [
            Stage::IngestOpps,
            Stage::FetchOpenalex,
            Stage::BuildIndex,
            Stage::Calibrate,
        ] {
            assert_eq!(serde_json::to_value(s).unwrap(), s.name());
        }
    }
}
