//! Run configuration: defaults, file loading, flag overrides and the
//! per-stage configuration hash.

use std::path::{Path, PathBuf};

use polimatch_core::model::{validate_thresholds, TierThresholds};
use polimatch_core::scholar::FetchWindow;
use polimatch_core::vindex::{SearchConfig, DEFAULT_K};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::stage::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Mock,
    Remote,
}

/// Everything that determines a run. Serialisable so a run can be replayed
/// from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub thresholds: TierThresholds,
    pub k: usize,
    pub window: FetchWindow,
    pub embedder: EmbedderKind,
    pub embedder_url: Option<String>,
    pub rewriter_url: Option<String>,
    pub batch_size: usize,
    pub openalex_base: Option<String>,
    pub requests_per_second: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            thresholds: TierThresholds::default(),
            k: DEFAULT_K,
            window: FetchWindow::default(),
            embedder: EmbedderKind::Mock,
            embedder_url: None,
            rewriter_url: None,
            batch_size: 64,
            openalex_base: None,
            requests_per_second: 8.0,
        }
    }
}

/// Flag values that override the config file when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub k: Option<usize>,
    pub thresholds: Option<TierThresholds>,
    pub from_year: Option<i32>,
    pub to_year: Option<i32>,
    pub embedder: Option<EmbedderKind>,
}

/// Config keys each stage's own output depends on.
fn stage_keys(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::IngestOpps | Stage::Embed => &["embedder", "embedder_url"],
        Stage::FetchOpenalex => &["window", "openalex_base"],
        Stage::Rewrite => &["rewriter_url"],
        Stage::Match => &["thresholds", "k"],
        Stage::Calibrate => &["thresholds"],
        Stage::BuildIndex | Stage::Rank | Stage::Coverage | Stage::Report | Stage::Serve => &[],
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("invalid config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(d) = &o.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(k) = o.k {
            cfg.k = k;
        }
        if let Some(t) = o.thresholds {
            cfg.thresholds = t;
        }
        if let Some(e) = o.embedder {
            cfg.embedder = e;
        }
        if o.from_year.is_some() || o.to_year.is_some() {
            let from = o.from_year.unwrap_or(cfg.window.from_year());
            let to = o.to_year.unwrap_or(cfg.window.to_year());
            cfg.window = FetchWindow::new(from, to).map_err(|e| CliError::Config(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        validate_thresholds(self.thresholds).map_err(|e| CliError::Config(e.to_string()))?;
        SearchConfig::new(self.k).map_err(|e| CliError::Config(e.to_string()))?;
        if self.embedder == EmbedderKind::Remote && self.embedder_url.is_none() {
            return Err(CliError::Config("embedder = remote requires embedder_url".into()));
        }
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be positive".into()));
        }
        if !(self.requests_per_second > 0.0) {
            return Err(CliError::Config("requests_per_second must be positive".into()));
        }
        Ok(())
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig::new(self.k).expect("validated on load")
    }

    /// Digest of the config keys that `stage` and everything upstream of it
    /// depend on. Paths never contribute, so relocating a data directory
    /// keeps its artifacts valid.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let full = serde_json::to_value(self).expect("config serialises");
        let mut keys: Vec<&str> = stage
            .closure()
            .into_iter()
            .flat_map(|s| stage_keys(s).iter().copied())
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let subset: serde_json::Map<String, Value> =
            keys.into_iter().map(|k| (k.to_string(), full[k].clone())).collect();
        let bytes = serde_json::to_vec(&subset).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}
