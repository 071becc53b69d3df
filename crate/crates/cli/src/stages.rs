//! One function per subcommand. Stages talk to each other only through files
//! in the data directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use polimatch_core::analytics::{
    distribution, report_csv, report_json, scatter, Dimension, OpportunityFilter, Report, ScatterMode,
};
use polimatch_core::calibration::{
    evaluate_tiers, is_monotonic, propose_thresholds, read_scored_pairs, write_quality_table, CalibrationError,
};
use polimatch_core::embedding::{embed, read_store, write_store, Embedder, MockEmbedder, RemoteEmbedder, VectorStore};
use polimatch_core::http::{ReqwestTransport, RetryPolicy, Transport};
use polimatch_core::matching::{
    rank_researchers, write_coverage_csv, write_matches_csv, CoverageRow, MatchRecord, OpportunityLabel, Scope,
};
use polimatch_core::model::{CofogDivision, Opportunity};
use polimatch_core::opportunity::{
    compose_opportunity_text, load_opportunities, read_rewrites_ndjson, rewrite_all, write_opportunities_ndjson,
    write_rewrites_ndjson, CentroidClassifier, InputFormat, RemoteRewriter, RewriteError, Rewriter, TemplateRewriter,
};
use polimatch_core::scholar::{
    compose_publication_text, filter_publications, is_institution_id, read_institutions, read_publications_ndjson,
    read_stats, usable_abstract, write_publications_ndjson, write_stats, CachingTransport, Institution, OpenAlexClient,
    Publication, TokenBucket, START_CURSOR,
};
use polimatch_core::vindex::build_index;
use polimatch_service::pipeline;
use polimatch_service::snapshot::{
    PublishSettings, INSTITUTIONS_FILE, OPPORTUNITIES_FILE, OPPORTUNITY_VECTORS_FILE, PUBLICATIONS_FILE,
    PUBLICATION_VECTORS_FILE, REWRITES_FILE, SETTINGS_FILE,
};
use polimatch_service::{Artifact, SnapshotStore};
use serde::{Deserialize, Serialize};

use crate::config::{EmbedderKind, RunConfig};
use crate::error::CliError;
use crate::stage::*;

const HTTP_TIMEOUT: Duration = Duration::from_secs(60);

/// Bookkeeping for one stage invocation.
pub struct Run<'a> {
    cfg: &'a RunConfig,
    stage: Stage,
    force: bool,
    started: Instant,
    counts: BTreeMap<String, u64>,
    timings: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Run<'a> {
    pub fn start(cfg: &'a RunConfig, stage: Stage, inputs: &[&str], force: bool) -> Result<Self, CliError> {
        let inputs = check_inputs(cfg, stage, inputs, force)?;
        Ok(Self {
            cfg,
            stage,
            force,
            started: Instant::now(),
            counts: BTreeMap::new(),
            timings: BTreeMap::new(),
            inputs,
            outputs: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.data_dir.join(name)
    }

    /// Records a file that lives outside the data directory.
    fn external_input(&mut self, path: &Path) -> Result<(), CliError> {
        if !path.is_file() {
            return Err(CliError::Usage(format!("missing input {}", path.display())));
        }
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path(name), bytes)?;
        self.outputs.insert(name.to_string(), hex_digest(bytes));
        Ok(())
    }

    fn record_written(&mut self, name: &str) -> Result<(), CliError> {
        let digest = file_digest(&self.path(name))?;
        self.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    fn count(&mut self, key: &str, n: usize) {
        self.counts.insert(key.to_string(), n as u64);
    }

    fn time<T>(&mut self, key: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.insert(key.to_string(), t.elapsed().as_millis() as u64);
        out
    }

    /// Writes a diagnostics file and returns the validation error naming it.
    fn invalid<T: Serialize>(&self, problems: &[T]) -> CliError {
        let path = self
            .cfg
            .data_dir
            .join(DIAGNOSTICS_DIR)
            .join(format!("{}.json", self.stage.name()));
        let body = serde_json::json!({ "stage": self.stage, "problems": problems });
        match serde_json::to_vec_pretty(&body)
            .map_err(|e| CliError::Internal(e.to_string()))
            .and_then(|b| write_atomic(&path, &b))
        {
            Ok(()) => CliError::Validation {
                stage: self.stage,
                count: problems.len(),
                diagnostics: path,
            },
            Err(e) => e,
        }
    }

    fn invalid_one(&self, message: impl ToString) -> CliError {
        self.invalid(&[message.to_string()])
    }

    pub fn finish(mut self) -> Result<StageSummary, CliError> {
        self.timings
            .insert("total".into(), self.started.elapsed().as_millis() as u64);
        let summary = StageSummary {
            stage: self.stage,
            config_hash: self.cfg.stage_hash(self.stage),
            forced: self.force,
            counts: self.counts,
            timings_ms: self.timings,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let bytes = serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
        write_atomic(&summary_path(&self.cfg.data_dir, self.stage), &bytes)?;
        let cfg_bytes = serde_json::to_vec_pretty(self.cfg).map_err(|e| CliError::Internal(e.to_string()))?;
        write_atomic(&self.cfg.data_dir.join("config.json"), &cfg_bytes)?;
        Ok(summary)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn transport() -> Result<Arc<dyn Transport>, CliError> {
    let t = ReqwestTransport::new(HTTP_TIMEOUT).map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(Arc::new(t))
}

fn embedder(cfg: &RunConfig) -> Result<Box<dyn Embedder>, CliError> {
    Ok(match cfg.embedder {
        EmbedderKind::Mock => Box::new(MockEmbedder),
        EmbedderKind::Remote => {
            let url = cfg.embedder_url.clone().expect("validated on load");
            Box::new(RemoteEmbedder::new(
                transport()?,
                url,
                RetryPolicy::default(),
                cfg.batch_size,
            ))
        }
    })
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>,
{
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(buf)
}

fn ndjson_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| CliError::Internal(e.to_string()))?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn read_ndjson<T: for<'de> Deserialize<'de>>(run: &Run, name: &str) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for (i, line) in open(&run.path(name))?.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(&run.path(name), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| run.invalid_one(format!("{name} line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn load_stored_opportunities(run: &Run) -> Result<Vec<Opportunity>, CliError> {
    let report = load_opportunities(open(&run.path(OPPORTUNITIES))?, InputFormat::Ndjson, None)
        .map_err(|e| run.invalid_one(format!("{OPPORTUNITIES}: {e}")))?;
    if !report.errors.is_empty() {
        return Err(run.invalid(&report.errors));
    }
    Ok(report.records)
}

fn load_publications(run: &Run) -> Result<Vec<Publication>, CliError> {
    read_publications_ndjson(open(&run.path(PUBLICATIONS))?)
        .map_err(|e| run.invalid_one(format!("{PUBLICATIONS}: {e}")))
}

fn load_institution_list(run: &Run, path: &Path) -> Result<Vec<Institution>, CliError> {
    read_institutions(open(path)?).map_err(|e| run.invalid_one(format!("{}: {e}", path.display())))
}

/// Institution ids reported on: the stored list when present, otherwise every
/// affiliation seen on a publication.
fn institution_ids(run: &Run, pubs: &[Publication]) -> Result<Vec<String>, CliError> {
    let path = run.path(INSTITUTIONS);
    if !path.is_file() {
        return Ok(pipeline::institutions_of(pubs));
    }
    let mut ids: Vec<String> = load_institution_list(run, &path)?
        .into_iter()
        .map(|i| {
            if i.openalex_id.is_empty() {
                i.display_name
            } else {
                i.openalex_id
            }
        })
        .collect();
    ids.sort();
    Ok(ids)
}

// ---- ingest-opps ---------------------------------------------------------

pub struct IngestArgs {
    pub input: PathBuf,
    pub format: Option<InputFormat>,
    pub skip_invalid: bool,
}

pub fn ingest_opps(cfg: &RunConfig, args: &IngestArgs, force: bool) -> Result<StageSummary, CliError> {
    let mut run = Run::start(cfg, Stage::IngestOpps, &[], force)?;
    run.external_input(&args.input)?;
    let format = args
        .format
        .or_else(|| InputFormat::from_path(&args.input))
        .ok_or_else(|| {
            CliError::Usage(format!(
                "cannot infer format of {}; pass --format",
                args.input.display()
            ))
        })?;
    let embedder = embedder(cfg)?;
    let classifier = CentroidClassifier::new(embedder).map_err(|e| CliError::External {
        stage: Stage::IngestOpps,
        message: e.to_string(),
    })?;
    let report = run.time("load", || {
        load_opportunities(open(&args.input)?, format, Some(&classifier))
            .map_err(|e| (e, ()))
            .map_err(|(e, _)| CliError::Usage(format!("{}: {e}", args.input.display())))
    })?;
    run.count("records", report.records.len());
    run.count("rejected", report.errors.len());
    if !report.errors.is_empty() {
        let err = run.invalid(&report.errors);
        if !args.skip_invalid {
            return Err(err);
        }
        eprintln!("warning: {err}");
    }
    if report.records.is_empty() {
        return Err(run.invalid_one("no valid opportunities"));
    }
    let mut buf = Vec::new();
    write_opportunities_ndjson(&report.records, &mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
    run.write(OPPORTUNITIES, &buf)?;
    run.finish()
}

// ---- fetch-openalex ------------------------------------------------------

pub struct FetchArgs {
    pub institutions: Option<PathBuf>,
    /// Local dump in publication NDJSON form, used instead of the API.
    pub input: Option<PathBuf>,
    pub per_page: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct FetchProgress {
    next_cursor: Option<String>,
    done: bool,
    works: u64,
}

type FetchState = BTreeMap<String, FetchProgress>;

pub fn fetch_openalex(cfg: &RunConfig, args: &FetchArgs, force: bool) -> Result<StageSummary, CliError> {
    let mut run = Run::start(cfg, Stage::FetchOpenalex, &[], force)?;
    let institutions = match &args.institutions {
        Some(p) => {
            run.external_input(p)?;
            Some(load_institution_list(&run, p)?)
        }
        None => None,
    };

    let mut pubs = match &args.input {
        Some(path) => {
            run.external_input(path)?;
            let all = read_publications_ndjson(open(path)?)
                .map_err(|e| run.invalid_one(format!("{}: {e}", path.display())))?;
            run.count("input_works", all.len());
            all.into_iter().filter(|p| cfg.window.contains(p.year)).collect()
        }
        None => {
            let list = institutions
                .as_ref()
                .ok_or_else(|| CliError::Usage("fetch-openalex needs --institutions or --input".into()))?;
            let missing: Vec<String> = list
                .iter()
                .filter(|i| !is_institution_id(&i.openalex_id))
                .map(|i| {
                    format!(
                        "{}: missing or malformed OpenAlex id {:?}",
                        i.display_name, i.openalex_id
                    )
                })
                .collect();
            if !missing.is_empty() {
                return Err(run.invalid(&missing));
            }
            run.time("fetch", || fetch_online(cfg, list, args.per_page))?
        }
    };
    pubs.sort_by(|a, b| a.id.cmp(&b.id));
    pubs.dedup_by(|a, b| a.id == b.id);

    let kept = filter_publications(pubs.clone());
    run.count("works", pubs.len());
    run.count("eligible", kept.len());
    run.count("with_abstract", kept.iter().filter(|p| usable_abstract(p)).count());

    let mut buf = Vec::new();
    write_publications_ndjson(&pubs, &mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
    run.write(PUBLICATIONS, &buf)?;
    if let Some(p) = &args.institutions {
        let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
        run.write(INSTITUTIONS, &bytes)?;
    }
    run.finish()
}

/// Pages through each institution, appending works and checkpointing the
/// cursor after every page so an interrupted fetch resumes where it stopped.
fn fetch_online(cfg: &RunConfig, list: &[Institution], per_page: u32) -> Result<Vec<Publication>, CliError> {
    let dir = cfg.data_dir.join(FETCH_DIR);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let state_path = dir.join("state.json");
    let mut state: FetchState = if state_path.is_file() {
        serde_json::from_reader(open(&state_path)?)
            .map_err(|e| CliError::Internal(format!("corrupt fetch state: {e}")))?
    } else {
        FetchState::new()
    };
    let cache = CachingTransport::new(transport()?, cfg.data_dir.join(CACHE_DIR).join("openalex"))
        .map_err(|e| CliError::io(&cfg.data_dir.join(CACHE_DIR), e))?;
    let mut client = OpenAlexClient::new(Arc::new(cache))
        .with_per_page(per_page)
        .with_limiter(Arc::new(TokenBucket::new(
            cfg.requests_per_second.ceil() as u32,
            cfg.requests_per_second,
        )));
    if let Some(base) = &cfg.openalex_base {
        client = client.with_base_url(base.clone());
    }

    for inst in list {
        let id = inst.openalex_id.clone();
        let progress = state.entry(id.clone()).or_default().clone();
        if progress.done {
            continue;
        }
        let part = dir.join(format!("{id}.ndjson"));
        let mut out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&part)
            .map_err(|e| CliError::io(&part, e))?;
        let cursor = progress.next_cursor.clone().unwrap_or_else(|| START_CURSOR.to_string());
        let mut io_error = None;
        let result = client.fetch_pages(&id, cfg.window, &cursor, |page| {
            let step = (|| -> Result<(), CliError> {
                let mut buf = Vec::new();
                write_publications_ndjson(&page.works, &mut buf).map_err(|e| CliError::io(&part, e))?;
                out.write_all(&buf).map_err(|e| CliError::io(&part, e))?;
                out.flush().map_err(|e| CliError::io(&part, e))?;
                let p = state.get_mut(&id).expect("entry inserted above");
                p.works += page.works.len() as u64;
                p.next_cursor = page.next_cursor.clone();
                p.done = page.next_cursor.is_none() || page.works.is_empty();
                let bytes = serde_json::to_vec_pretty(&state).map_err(|e| CliError::Internal(e.to_string()))?;
                write_atomic(&state_path, &bytes)
            })();
            step.map_err(|e| {
                let msg = e.to_string();
                io_error = Some(e);
                polimatch_core::scholar::FetchError::Decode {
                    url: String::new(),
                    message: msg,
                }
            })
        });
        if let Some(e) = io_error {
            return Err(e);
        }
        result.map_err(|e| CliError::External {
            stage: Stage::FetchOpenalex,
            message: format!("{id}: {e} (progress saved; re-run to resume)"),
        })?;
        tracing::info!(institution = %id, works = state[&id].works, "institution fetched");
    }

    let mut seen = BTreeSet::new();
    let mut pubs = Vec::new();
    for inst in list {
        let part = dir.join(format!("{}.ndjson", inst.openalex_id));
        if !part.is_file() {
            continue;
        }
        for line in open(&part)?.lines() {
            let line = line.map_err(|e| CliError::io(&part, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Publication =
                serde_json::from_str(&line).map_err(|e| CliError::Internal(format!("{}: {e}", part.display())))?;
            if seen.insert(p.id.clone()) {
                pubs.push(p);
            }
        }
    }
    Ok(pubs)
}

// ---- rewrite -------------------------------------------------------------

pub fn rewrite(cfg: &RunConfig, force: bool) -> Result<StageSummary, CliError> {
    let mut run = Run::start(cfg, Stage::Rewrite, &[OPPORTUNITIES], force)?;
    let opps = load_stored_opportunities(&run)?;
    let provider: Box<dyn Rewriter> = match &cfg.rewriter_url {
        Some(url) => Box::new(RemoteRewriter::new(transport()?, url.clone(), RetryPolicy::default())),
        None => Box::new(TemplateRewriter),
    };
    let rewrites = run
        .time("rewrite", || rewrite_all(&opps, provider.as_ref()))
        .map_err(|e| match e {
            RewriteError::Schema { .. } => run.invalid_one(&e),
            RewriteError::Provider { .. } => CliError::External {
                stage: Stage::Rewrite,
                message: e.to_string(),
            },
        })?;
    run.count("rewrites", rewrites.len());
    let mut buf = Vec::new();
    write_rewrites_ndjson(&rewrites, &mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
    run.write(REWRITES, &buf)?;
    run.finish()
}

// ---- embed ---------------------------------------------------------------

pub fn embed_stage(cfg: &RunConfig, force: bool) -> Result<StageSummary, CliError> {
    let mut run = Run::start(cfg, Stage::Embed, &[REWRITES, PUBLICATIONS], force)?;
    let rewrites =
        read_rewrites_ndjson(open(&run.path(REWRITES))?).map_err(|e| run.invalid_one(format!("{REWRITES}: {e}")))?;
    let pubs = load_publications(&run)?;
    let provider = embedder(cfg)?;
    let external = |e: polimatch_core::embedding::EmbedError| CliError::External {
        stage: Stage::Embed,
        message: e.to_string(),
    };

    let texts: Vec<String> = rewrites.iter().map(compose_opportunity_text).collect();
    let vecs = run
        .time("opportunities", || embed(&texts, provider.as_ref()))
        .map_err(external)?;
    let opp_store = VectorStore::from_vectors(rewrites.iter().map(|r| r.opportunity_id.clone()).zip(vecs))
        .map_err(|e| run.invalid_one(e))?;

    let eligible: Vec<Publication> = filter_publications(pubs.clone())
        .into_iter()
        .filter(usable_abstract)
        .collect();
    let texts: Vec<String> = eligible
        .iter()
        .map(|p| compose_publication_text(p).expect("filtered to usable abstracts"))
        .collect();
    let vecs = run
        .time("publications", || embed(&texts, provider.as_ref()))
        .map_err(external)?;
    let pub_store =
        VectorStore::from_vectors(eligible.iter().map(|p| p.id.clone()).zip(vecs)).map_err(|e| run.invalid_one(e))?;

    run.count("opportunities", opp_store.len());
    run.count("publications", pubs.len());
    run.count("embedded_publications", pub_store.len());
    run.count("skipped_publications", pubs.len() - pub_store.len());
    for (name, store) in [(OPPORTUNITY_VECTORS, &opp_store), (PUBLICATION_VECTORS, &pub_store)] {
        write_store(store, &run.path(name)).map_err(|e| CliError::Internal(format!("{name}: {e}")))?;
        run.record_written(name)?;
    }
    run.finish()
}

// ---- build-index ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    records: usize,
    dim: usize,
    store_sha256: String,
}

pub fn build_index_stage(cfg: &RunConfig, force: bool) -> Result<StageSummary, CliError> {
    let mut run = Run::start(cfg, Stage::BuildIndex, &[PUBLICATION_VECTORS], force)?;
    let store = read_store(&run.path(PUBLICATION_VECTORS))
        .map_err(|e| run.invalid_one(format!("{PUBLICATION_VECTORS}: {e}")))?;
    let index = run
        .time("build", || build_index(store))
        .map_err(|e| run.invalid_one(e))?;
    let manifest = IndexManifest {
        records: index.len(),
        dim: index.dim(),
        store_sha256: run.inputs[PUBLICATION_VECTORS].clone(),
    };
    run.count("records", index.len());
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
    run.write(INDEX, &bytes)?;
    run.finish()
}

// ---- match ---------------------------------------------------------------

pub fn match_stage(cfg: &RunConfig, force: bool) -> Result<StageSummary, CliError> {
    let mut run = Run::start(
        cfg,
        Stage::Match,
        &[OPPORTUNITY_VECTORS, PUBLICATION_VECTORS, INDEX],
        force,
    )?;
    let manifest: IndexManifest =
        serde_json::from_reader(open(&run.path(INDEX))?).map_err(|e| run.invalid_one(format!("{INDEX}: {e}")))?;
    if manifest.store_sha256 != run.inputs[PUBLICATION_VECTORS] && !force {
        return Err(CliError::StaleInput {
            stage: Stage::Match,
            upstream: Stage::BuildIndex,
            input: PUBLICATION_VECTORS.into(),
        });
    }
    let read = |name: &str| read_store(&run.path(name)).map_err(|e| run.invalid_one(format!("{name}: {e}")));
    let opp_store = read(OPPORTUNITY_VECTORS)?;
    let index = build_index(read(PUBLICATION_VECTORS)?).map_err(|e| run.invalid_one(e))?;
    let records = run
        .time("search", || {
            pipeline::match_store(&opp_store, &index, &cfg.thresholds, cfg.search())
        })
        .map_err(|e| run.invalid_one(e))?;

    run.count("records", records.len());
    for tier in polimatch_core::model::Tier::ALL {
        run.count(
            &format!("tier_{}", tier.name().to_lowercase()),
            records.iter().filter(|r| r.tier == tier).count(),
        );
    }
    let green: BTreeSet<&str> = records
        .iter()
        .filter(|r| r.tier == polimatch_core::model::Tier::Green)
        .map(|r| r.opportunity_id.as_str())
        .collect();
    run.count("opportunities_with_green", green.len());

    let csv = csv_bytes(|b| write_matches_csv(&records, b))?;
    run.write(MATCHES, &csv)?;
    run.write(MATCHES_RAW, &ndjson_bytes(&records)?)?;
    run.finish()
}

// ---- rank ----------------------------------------------------------------

pub fn rank(cfg: &RunConfig, opportunity: Option<&str>, force: bool) -> Result<StageSummary, CliError> {
    let mut run = Run::start(cfg, Stage::Rank, &[MATCHES_RAW, PUBLICATIONS], force)?;
    let records: Vec<MatchRecord> = read_ndjson(&run, MATCHES_RAW)?;
    let authors = pipeline::publication_authors(&load_publications(&run)?);
    let mut by_opp: BTreeMap<&str, Vec<MatchRecord>> = BTreeMap::new();
    for r in &records {
        by_opp.entry(&r.opportunity_id).or_default().push(r.clone());
    }
    if let Some(id) = opportunity {
        if !by_opp.contains_key(id) {
            return Err(CliError::Usage(format!("opportunity {id:?} has no matches")));
        }
        by_opp.retain(|k, _| *k == id);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut rows = 0;
    let wr = |e: csv::Error| CliError::Internal(e.to_string());
    w.write_record([
        "opportunity_id",
        "rank",
        "author_id",
        "matched_work_count",
        "best_distance",
    ])
    .map_err(wr)?;
    for (opp, recs) in &by_opp {
        let ranked = rank_researchers(recs, &authors).map_err(|e| run.invalid_one(e))?;
        for r in ranked {
            w.write_record([
                opp.to_string(),
                r.rank.to_string(),
                r.author_id,
                r.matched_work_count.to_string(),
                format!("{:.6}", r.best_distance),
            ])
            .map_err(wr)?;
            rows += 1;
        }
    }
    run.count("opportunities", by_opp.len());
    run.count("rows", rows);
    let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    run.write(RESEARCHERS, &bytes)?;
    run.finish()
}

// ---- coverage ------------------------------------------------------------

pub fn coverage_stage(cfg: &RunConfig, cofog: Option<CofogDivision>, force: bool) -> Result<StageSummary, CliError> {
    let mut inputs = vec![MATCHES_RAW, PUBLICATIONS, OPPORTUNITIES];
    if cfg.data_dir.join(INSTITUTIONS).is_file() {
        inputs.push(INSTITUTIONS);
    }
    let mut run = Run::start(cfg, Stage::Coverage, &inputs, force)?;
    let records: Vec<MatchRecord> = read_ndjson(&run, MATCHES_RAW)?;
    let pubs = load_publications(&run)?;
    let opps = load_stored_opportunities(&run)?;
    let labels: Vec<OpportunityLabel> = opps.iter().map(OpportunityLabel::from).collect();
    let institutions = institution_ids(&run, &pubs)?;
    let scopes = match cofog {
        Some(d) => vec![Scope::Division(d)],
        None => pipeline::scopes_present(&labels),
    };
    let rows =
        pipeline::coverage_table(&records, &pubs, &labels, &institutions, &scopes).map_err(|e| run.invalid_one(e))?;
    let stats = pipeline::institution_stats(&pubs, &records, &institutions);

    run.count("institutions", institutions.len());
    run.count("scopes", scopes.len());
    run.count("rows", rows.len());
    for s in &scopes {
        let n = rows.iter().find(|r| r.scope == *s).map_or(0, |r| r.n_opportunities);
        run.counts.insert(format!("denominator_{s}"), n);
    }
    let csv = csv_bytes(|b| write_coverage_csv(&rows, b))?;
    run.write(COVERAGE, &csv)?;
    run.write(COVERAGE_RAW, &ndjson_bytes(&rows)?)?;
    let stats_csv = csv_bytes(|b| write_stats(&stats, b))?;
    run.write(STATS, &stats_csv)?;
    run.finish()
}

// ---- report --------------------------------------------------------------

pub struct ReportArgs {
    pub cofog: Option<CofogDivision>,
    pub json: bool,
}

pub fn report(cfg: &RunConfig, args: &ReportArgs, force: bool) -> Result<StageSummary, CliError> {
    let mut run = Run::start(cfg, Stage::Report, &[OPPORTUNITIES, STATS, COVERAGE_RAW], force)?;
    let opps = load_stored_opportunities(&run)?;
    let stats = read_stats(open(&run.path(STATS))?).map_err(|e| run.invalid_one(format!("{STATS}: {e}")))?;
    let coverage: Vec<CoverageRow> = read_ndjson(&run, COVERAGE_RAW)?;

    let mut reports: Vec<(String, Report)> = Vec::new();
    for dim in [Dimension::Cofog, Dimension::Country, Dimension::OpportunityType] {
        let d = distribution(&opps, dim, &OpportunityFilter::default()).map_err(|e| run.invalid_one(e))?;
        reports.push((format!("distribution_{}", dim.name()), Report::Distribution(d)));
    }
    let mut scopes: Vec<Scope> = Vec::new();
    for r in &coverage {
        if !scopes.contains(&r.scope) {
            scopes.push(r.scope);
        }
    }
    if let Some(d) = args.cofog {
        scopes.retain(|s| *s == Scope::Division(d));
        if scopes.is_empty() {
            return Err(run.invalid_one(format!("coverage has no rows for scope {}", d.code_str())));
        }
    }
    if scopes.contains(&Scope::All) {
        let points = scatter(&stats, &coverage, ScatterMode::Absolute, Scope::All).map_err(|e| run.invalid_one(e))?;
        reports.push((
            "scatter_absolute".into(),
            Report::Scatter {
                mode: ScatterMode::Absolute,
                points,
            },
        ));
    }
    for s in &scopes {
        let points = scatter(&stats, &coverage, ScatterMode::Coverage, *s).map_err(|e| run.invalid_one(e))?;
        reports.push((
            format!("scatter_coverage_{s}"),
            Report::Scatter {
                mode: ScatterMode::Coverage,
                points,
            },
        ));
    }
    reports.push(("institution_stats".into(), Report::Stats(stats)));

    for (name, r) in &reports {
        let mut buf = Vec::new();
        report_csv(r, &mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
        run.write(&format!("{REPORTS_DIR}/{name}.csv"), &buf)?;
        if args.json {
            let json = report_json(r).map_err(|e| CliError::Internal(e.to_string()))?;
            run.write(&format!("{REPORTS_DIR}/{name}.json"), json.as_bytes())?;
        }
    }
    run.count("reports", reports.len());
    run.finish()
}

// ---- calibrate -----------------------------------------------------------

pub struct CalibrateArgs {
    pub pairs: PathBuf,
    pub propose: bool,
    pub grid_step: f64,
    pub min_tier_fraction: f64,
}

pub fn calibrate(cfg: &RunConfig, args: &CalibrateArgs, force: bool) -> Result<StageSummary, CliError> {
    let mut run = Run::start(cfg, Stage::Calibrate, &[], force)?;
    run.external_input(&args.pairs)?;
    let pairs = read_scored_pairs(open(&args.pairs)?).map_err(|e| run.invalid_one(e))?;
    run.count("pairs", pairs.len());
    let table = evaluate_tiers(&pairs, &cfg.thresholds).map_err(|e| run.invalid_one(e))?;
    let csv = csv_bytes(|b| write_quality_table(&table, b))?;
    run.write(&format!("{CALIBRATION_DIR}/quality_table.csv"), &csv)?;
    let verdict = match is_monotonic(&table) {
        Ok(report) => serde_json::json!({ "monotonic": report.is_monotonic(), "metrics": report }),
        Err(e) => serde_json::json!({ "monotonic": null, "error": e.to_string() }),
    };
    let bytes = serde_json::to_vec_pretty(&verdict).map_err(|e| CliError::Internal(e.to_string()))?;
    run.write(&format!("{CALIBRATION_DIR}/monotonicity.json"), &bytes)?;

    if args.propose {
        let t = run
            .time("propose", || {
                propose_thresholds(&pairs, args.grid_step, args.min_tier_fraction)
            })
            .map_err(|e| match e {
                CalibrationError::Infeasible(_) | CalibrationError::TooFewPairs { .. } => run.invalid_one(e),
                other => CliError::Usage(other.to_string()),
            })?;
        let proposed = evaluate_tiers(&pairs, &t).map_err(|e| run.invalid_one(e))?;
        let body = serde_json::json!({
            "thresholds": t,
            "grid_step": args.grid_step,
            "min_tier_fraction": args.min_tier_fraction,
            "quality": proposed,
        });
        let bytes = serde_json::to_vec_pretty(&body).map_err(|e| CliError::Internal(e.to_string()))?;
        run.write(&format!("{CALIBRATION_DIR}/proposed_thresholds.json"), &bytes)?;
        println!("proposed thresholds: {t}");
    }
    run.finish()
}

// ---- serve ---------------------------------------------------------------

pub struct ServeArgs {
    pub host: String,
    pub port: u16,
    pub publish: bool,
    pub datasets: Vec<(String, PathBuf)>,
}

/// Artifacts for a snapshot built from the pipeline outputs in the data
/// directory, with thresholds and k taken from the run config.
pub fn snapshot_artifacts(cfg: &RunConfig, datasets: &[(String, PathBuf)]) -> Result<Vec<Artifact>, CliError> {
    let mut out = Vec::new();
    for (src, name) in [
        (OPPORTUNITIES, OPPORTUNITIES_FILE),
        (REWRITES, REWRITES_FILE),
        (PUBLICATIONS, PUBLICATIONS_FILE),
        (OPPORTUNITY_VECTORS, OPPORTUNITY_VECTORS_FILE),
        (PUBLICATION_VECTORS, PUBLICATION_VECTORS_FILE),
        (INSTITUTIONS, INSTITUTIONS_FILE),
    ] {
        let path = cfg.data_dir.join(src);
        if !path.is_file() {
            if src == INSTITUTIONS || src == REWRITES {
                continue;
            }
            return Err(CliError::Usage(format!("missing input {}", path.display())));
        }
        out.push(Artifact {
            name: name.to_string(),
            bytes: fs::read(&path).map_err(|e| CliError::io(&path, e))?,
        });
    }
    let settings = PublishSettings {
        thresholds: cfg.thresholds,
        k: cfg.k,
    };
    out.push(Artifact {
        name: SETTINGS_FILE.to_string(),
        bytes: serde_json::to_vec(&settings).map_err(|e| CliError::Internal(e.to_string()))?,
    });
    for (name, path) in datasets {
        out.push(Artifact {
            name: format!("datasets/{name}.csv"),
            bytes: fs::read(path).map_err(|e| CliError::io(path, e))?,
        });
    }
    Ok(out)
}

pub fn serve(cfg: &RunConfig, args: &ServeArgs) -> Result<(), CliError> {
    if args.publish {
        let store = SnapshotStore::open(&cfg.data_dir).map_err(|e| CliError::Internal(e.to_string()))?;
        let meta = store
            .publish(snapshot_artifacts(cfg, &args.datasets)?)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        println!("published snapshot {}", meta.snapshot_id);
    }
    let addr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid address {}:{}: {e}", args.host, args.port)))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    println!("listening on http://{addr}");
    rt.block_on(polimatch_service::serve(polimatch_service::ServeConfig {
        addr,
        data_dir: cfg.data_dir.clone(),
    }))
    .map_err(|e| CliError::Internal(e.to_string()))
}
