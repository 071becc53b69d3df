//! Command-line driver: each subcommand is one pipeline stage that reads its
//! inputs from the data directory and writes its outputs plus a run summary

// `!(x >= 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! back to it.

pub mod cli;
pub mod config;
pub mod error;
pub mod stage;
pub mod stages;

pub use cli::{Cli, Command};
pub use config::{EmbedderKind, Overrides, RunConfig};
pub use error::{exit, CliError};
pub use stage::{Stage, StageSummary};

use stages::{CalibrateArgs, FetchArgs, IngestArgs, ReportArgs, ServeArgs};

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<Option<StageSummary>, CliError> {
    let cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides())?;
    let force = cli.global.force;
    let summary = match cli.command {
        Command::IngestOpps {
            input,
            format,
            skip_invalid,
        } => stages::ingest_opps(
            &cfg,
            &IngestArgs {
                input,
                format,
                skip_invalid,
            },
            force,
        )?,
        Command::FetchOpenalex {
            institutions,
            input,
            per_page,
        } => stages::fetch_openalex(
            &cfg,
            &FetchArgs {
                institutions,
                input,
                per_page,
            },
            force,
        )?,
        Command::Rewrite => stages::rewrite(&cfg, force)?,
        Command::Embed => stages::embed_stage(&cfg, force)?,
        Command::BuildIndex => stages::build_index_stage(&cfg, force)?,
        Command::Match => stages::match_stage(&cfg, force)?,
        Command::Rank { opportunity } => stages::rank(&cfg, opportunity.as_deref(), force)?,
        Command::Coverage { cofog } => stages::coverage_stage(&cfg, cofog, force)?,
        Command::Report { cofog, json } => stages::report(&cfg, &ReportArgs { cofog, json }, force)?,
        Command::Calibrate {
            pairs,
            propose,
            grid_step,
            min_tier_fraction,
        } => stages::calibrate(
            &cfg,
            &CalibrateArgs {
                pairs,
                propose,
                grid_step,
                min_tier_fraction,
            },
            force,
        )?,
        Command::Serve {
            host,
            port,
            publish,
            datasets,
        } => {
            stages::serve(
                &cfg,
                &ServeArgs {
                    host,
                    port,
                    publish,
                    datasets,
                },
            )?;
            return Ok(None);
        }
    };
    Ok(Some(summary))
}
