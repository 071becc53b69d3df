use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use polimatch_core::model::{CofogDivision, TierThresholds};
use polimatch_core::opportunity::InputFormat;

use crate::config::{EmbedderKind, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "polimatch",
    version,
    about = "Match policy opportunities to academic expertise"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding every stage's inputs and outputs.
    #[arg(long, global = true, env = "POLIMATCH_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Neighbours retrieved per opportunity.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Tier upper bounds as four comma-separated distances.
    #[arg(long, global = true)]
    pub thresholds: Option<TierThresholds>,
    #[arg(long, global = true)]
    pub from_year: Option<i32>,
    #[arg(long, global = true)]
    pub to_year: Option<i32>,
    #[arg(long, global = true, value_enum)]
    pub embedder: Option<EmbedderKind>,
    /// Run even when upstream outputs were produced under a different
    /// configuration or have changed since.
    #[arg(long, global = true)]
    pub force: bool,
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            data_dir: self.data_dir.clone(),
            k: self.k,
            thresholds: self.thresholds,
            from_year: self.from_year,
            to_year: self.to_year,
            embedder: self.embedder,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, validate and classify opportunity records.
    IngestOpps {
        #[arg(long)]
        input: PathBuf,
        /// csv, json or ndjson; inferred from the extension when omitted.
        #[arg(long)]
        format: Option<InputFormat>,
        /// Keep valid rows when some rows fail validation.
        #[arg(long)]
        skip_invalid: bool,
    },
    /// Retrieve publications for the configured institutions.
    FetchOpenalex {
        /// Institution list CSV.
        #[arg(long)]
        institutions: Option<PathBuf>,
        /// Read works from a local publication NDJSON dump instead of the API.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        per_page: u32,
    },
    /// Rewrite opportunities into the embedding schema.
    Rewrite,
    /// Embed rewritten opportunities and eligible publications.
    Embed,
    /// Build the nearest-neighbour index over publication vectors.
    BuildIndex,
    /// Retrieve and tier the nearest publications for each opportunity.
    Match,
    /// Rank researchers per opportunity.
    Rank {
        #[arg(long)]
        opportunity: Option<String>,
    },
    /// Per-institution coverage by policy area.
    Coverage {
        /// Restrict to one COFOG division.
        #[arg(long)]
        cofog: Option<CofogDivision>,
    },
    /// Export distribution, scatter and institution reports.
    Report {
        #[arg(long)]
        cofog: Option<CofogDivision>,
        /// Also write JSON next to each CSV.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate tier quality against expert-scored pairs.
    Calibrate {
        #[arg(long)]
        pairs: PathBuf,
        /// Search for thresholds that maximise separation.
        #[arg(long)]
        propose: bool,
        #[arg(long, default_value_t = 0.005)]
        grid_step: f64,
        #[arg(long, default_value_t = 0.05)]
        min_tier_fraction: f64,
    },
    /// Serve the active snapshot over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "POLIMATCH_PORT", default_value_t = 8080)]
        port: u16,
        /// Publish the current pipeline outputs as a new snapshot first.
        #[arg(long)]
        publish: bool,
        /// Extra COFOG count table to publish, as NAME=PATH.
        #[arg(long = "dataset", value_parser = parse_dataset)]
        datasets: Vec<(String, PathBuf)>,
    },
}

fn parse_dataset(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=PATH, got {s:?}"))?;
    let valid = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if !valid {
        return Err(format!("dataset name {name:?} must be alphanumeric, '-' or '_'"));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}
