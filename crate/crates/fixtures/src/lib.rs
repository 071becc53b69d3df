//! Seeded synthetic corpora.
//!
//! Publications are either perturbed copies of an opportunity's composed text
//! (so the mock embedder places them at graded distances from it) or
//! unrelated topical text. Everything is a pure function of the `CorpusSpec`.

pub mod oracle;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use polimatch_core::calibration::{EvalScores, ScoredPair};
use polimatch_core::embedding::{embed, write_store, MockEmbedder, VectorStore};
use polimatch_core::model::{CofogDivision, Opportunity, OpportunityType};
use polimatch_core::opportunity::{
    compose_opportunity_text, default_seeds, rewrite_all, write_opportunities_ndjson, write_rewrites_ndjson, Rewriter,
    TemplateRewriter,
};
use polimatch_core::scholar::{
    compose_publication_text, filter_publications, usable_abstract, write_publications_ndjson, DocType, Institution,
    Publication,
};
use polimatch_core::text::{stopwords, tokenize};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FILLER: &[&str] = &[
    "analysis",
    "framework",
    "cohort",
    "longitudinal",
    "survey",
    "evidence",
    "model",
    "estimate",
    "sample",
    "regional",
    "national",
    "outcomes",
    "impact",
    "evaluation",
    "trial",
    "dataset",
    "indicator",
    "measurement",
    "variation",
    "trend",
    "policy",
    "governance",
    "institutional",
    "stakeholder",
    "interview",
    "qualitative",
    "quantitative",
    "comparative",
    "network",
    "capacity",
    "resilience",
    "uncertainty",
    "scenario",
    "simulation",
    "projection",
    "baseline",
    "intervention",
    "adoption",
    "implementation",
    "barrier",
    "incentive",
    "market",
    "behaviour",
    "household",
    "firm",
    "sector",
    "workforce",
    "digital",
    "infrastructure",
    "monitoring",
    "risk",
    "assessment",
    "benchmark",
    "protocol",
    "review",
    "synthesis",
    "meta",
    "panel",
    "spatial",
    "temporal",
];

const COUNTRIES: &[&str] = &["GB", "GB", "GB", "US", "US", "AU", "CA", "DE", "NZ", "FR"];

const TYPES: &[OpportunityType] = &[
    OpportunityType::Ari,
    OpportunityType::Consultation,
    OpportunityType::Consultation,
    OpportunityType::LearningAgenda,
    OpportunityType::Funding,
    OpportunityType::Event,
    OpportunityType::Fellowship,
    OpportunityType::AdvisoryCommittee,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusSpec {
    pub n_opportunities: usize,
    pub n_publications: usize,
    pub n_institutions: usize,
    pub n_authors: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// The 50-opportunity / 500-publication acceptance fixture.
    pub const STANDARD: CorpusSpec = CorpusSpec {
        n_opportunities: 50,
        n_publications: 500,
        n_institutions: 8,
        n_authors: 150,
        seed: 20_250_101,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub opportunities: Vec<Opportunity>,
    pub publications: Vec<Publication>,
    pub institutions: Vec<Institution>,
}

fn topic_words(div: CofogDivision) -> Vec<String> {
    let seeds = default_seeds();
    let text = &seeds
        .iter()
        .find(|(d, _)| *d == div)
        .expect("every division has a seed")
        .1;
    let stop = stopwords();
    let mut words: Vec<String> = tokenize(text)
        .into_iter()
        .filter(|t| !stop.contains(t.as_str()))
        .collect();
    words.dedup();
    words
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn phrase(rng: &mut ChaCha8Rng, topic: &[String], len: usize) -> Vec<String> {
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.6) {
                topic.choose(rng).unwrap().clone()
            } else {
                FILLER.choose(rng).unwrap().to_string()
            }
        })
        .collect()
}

/// An opportunity whose description mixes its division's vocabulary with
/// generic research terms and ends in a question.
pub fn opportunity(
    rng: &mut ChaCha8Rng,
    id: String,
    country: &str,
    ty: OpportunityType,
    cofog: CofogDivision,
) -> Opportunity {
    let topic = topic_words(cofog);
    let title_words = phrase(rng, &topic, 4);
    let title = format!("{} {}", capitalize(&title_words[0]), title_words[1..].join(" "));
    let s1 = phrase(rng, &topic, 14).join(" ");
    let s2 = phrase(rng, &topic, 12).join(" ");
    let q = phrase(rng, &topic, 9).join(" ");
    Opportunity {
        source_url: format!("https://example.org/opportunities/{id}"),
        id,
        title,
        description: format!("{}. {}. How can {q}?", capitalize(&s1), capitalize(&s2)),
        organisation: format!("{} Department", capitalize(&topic[0])),
        country: country.to_string(),
        opportunity_type: ty,
        cofog,
        contact: None,
        deadline: Some("2025-06-30".into()),
        published_at: Some("2024-01-15".into()),
    }
}

/// Composed opportunity text with `swaps` random tokens replaced by filler
/// words, minus the opportunity marker.
fn perturbed_text(rng: &mut ChaCha8Rng, opp: &Opportunity, swaps: usize) -> Vec<String> {
    let rw = TemplateRewriter.rewrite(opp).expect("template rewriter is infallible");
    let mut toks = tokenize(&compose_opportunity_text(&rw));
    toks.remove(0);
    for _ in 0..swaps {
        let i = rng.gen_range(0..toks.len());
        toks[i] = FILLER.choose(rng).unwrap().to_string();
    }
    toks
}

pub fn generate(spec: CorpusSpec) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let opportunities: Vec<Opportunity> = (0..spec.n_opportunities)
        .map(|i| {
            let cofog = CofogDivision::ALL[i % CofogDivision::ALL.len()];
            let country = *COUNTRIES.choose(&mut rng).unwrap();
            let ty = *TYPES.choose(&mut rng).unwrap();
            opportunity(&mut rng, format!("op-{:03}", i + 1), country, ty, cofog)
        })
        .collect();
    let institutions: Vec<Institution> = (1..=spec.n_institutions)
        .map(|i| Institution {
            openalex_id: format!("I{i}"),
            display_name: format!("University {i}"),
            country: "GB".into(),
        })
        .collect();
    let publications = publications_for(&mut rng, &opportunities, spec);
    Corpus {
        opportunities,
        publications,
        institutions,
    }
}

fn publications_for(rng: &mut ChaCha8Rng, opps: &[Opportunity], spec: CorpusSpec) -> Vec<Publication> {
    (0..spec.n_publications)
        .map(|i| {
            let n_inst = if rng.gen_bool(0.2) { 2 } else { 1 };
            let mut institution_ids: Vec<String> = (0..n_inst)
                .map(|_| format!("I{}", rng.gen_range(1..=spec.n_institutions)))
                .collect();
            institution_ids.dedup();
            let author_ids: Vec<String> = (0..rng.gen_range(1..=4))
                .map(|_| format!("A{:03}", rng.gen_range(1..=spec.n_authors)))
                .collect();
            let roll: f64 = rng.gen();
            let (title, abstract_text) = if roll < 0.55 {
                let opp = opps.choose(rng).unwrap();
                let swaps = rng.gen_range(0..=14);
                (opp.title.clone(), Some(perturbed_text(rng, opp, swaps).join(" ")))
            } else {
                let div = *CofogDivision::ALL.choose(rng).unwrap();
                let topic = topic_words(div);
                let title = capitalize(&phrase(rng, &topic, 5).join(" "));
                let body = if roll < 0.95 {
                    Some(phrase(rng, &topic, 40).join(" "))
                } else {
                    None
                };
                (title, body)
            };
            let doc_type = match rng.gen_range(0..40) {
                0 => DocType::Other,
                1 => DocType::Editorial,
                2..=5 => DocType::BookChapter,
                6..=8 => DocType::Report,
                _ => DocType::JournalArticle,
            };
            Publication {
                id: format!("W{:04}", i + 1),
                title,
                abstract_text,
                year: rng.gen_range(2020..=2025),
                doc_type,
                author_ids,
                institution_ids,
                is_paratext: rng.gen_range(0..100) == 0,
                is_retracted: rng.gen_range(0..100) == 0,
            }
        })
        .collect()
}

/// Three GB and two AU opportunities, exactly one of them GB Health, with
/// publications derived from them.
pub fn small_corpus() -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows = [
        ("op-1", "GB", OpportunityType::Ari, CofogDivision::Health),
        ("op-2", "GB", OpportunityType::Consultation, CofogDivision::Defence),
        ("op-3", "GB", OpportunityType::Consultation, CofogDivision::Education),
        ("op-4", "AU", OpportunityType::Consultation, CofogDivision::Health),
        ("op-5", "AU", OpportunityType::Funding, CofogDivision::EconomicAffairs),
    ];
    let opportunities: Vec<Opportunity> = rows
        .iter()
        .map(|&(id, c, t, d)| opportunity(&mut rng, id.to_string(), c, t, d))
        .collect();
    let spec = CorpusSpec {
        n_opportunities: 5,
        n_publications: 60,
        n_institutions: 3,
        n_authors: 20,
        seed: 7,
    };
    let publications = publications_for(&mut rng, &opportunities, spec);
    let institutions = (1..=3)
        .map(|i| Institution {
            openalex_id: format!("I{i}"),
            display_name: format!("University {i}"),
            country: "GB".into(),
        })
        .collect();
    Corpus {
        opportunities,
        publications,
        institutions,
    }
}

fn write_institutions(list: &[Institution], path: &Path) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for i in list {
        w.serialize(i)?;
    }
    w.flush()
}

/// Set to `1` to rewrite frozen fixtures and golden files instead of
/// comparing against them.
pub const REGENERATE_ENV: &str = "POLIMATCH_REGENERATE";

/// Root of the frozen fixture tree checked into the repository.
pub fn frozen_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn regenerating() -> bool {
    std::env::var(REGENERATE_ENV).is_ok_and(|v| v == "1")
}

/// Writes the raw pipeline inputs: `opportunities.ndjson`,
/// `publications.ndjson` and `institutions.csv`.
pub fn write_raw_inputs(corpus: &Corpus, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_opportunities_ndjson(
        &corpus.opportunities,
        fs::File::create(dir.join("opportunities.ndjson"))?,
    )?;
    write_publications_ndjson(&corpus.publications, fs::File::create(dir.join("publications.ndjson"))?)?;
    write_institutions(&corpus.institutions, &dir.join("institutions.csv"))
}

/// Template rewrites plus mock-embedded opportunity and publication stores.
pub fn embed_corpus(
    corpus: &Corpus,
) -> (
    Vec<polimatch_core::opportunity::RewrittenOpportunity>,
    VectorStore,
    VectorStore,
) {
    let rewrites = rewrite_all(&corpus.opportunities, &TemplateRewriter).expect("template rewriter is infallible");
    let texts: Vec<String> = rewrites.iter().map(compose_opportunity_text).collect();
    let vecs = embed(&texts, &MockEmbedder).expect("mock embedder is infallible");
    let opp_store =
        VectorStore::from_vectors(rewrites.iter().map(|r| r.opportunity_id.clone()).zip(vecs)).expect("valid store");
    let eligible: Vec<Publication> = filter_publications(corpus.publications.clone())
        .into_iter()
        .filter(usable_abstract)
        .collect();
    let texts: Vec<String> = eligible
        .iter()
        .map(|p| compose_publication_text(p).expect("filtered to usable abstracts"))
        .collect();
    let vecs = embed(&texts, &MockEmbedder).expect("mock embedder is infallible");
    let pub_store = VectorStore::from_vectors(eligible.iter().map(|p| p.id.clone()).zip(vecs)).expect("valid store");
    (rewrites, opp_store, pub_store)
}

/// Writes a complete snapshot artifact directory for the service.
pub fn write_snapshot_dir(corpus: &Corpus, dir: &Path) -> io::Result<()> {
    write_raw_inputs(corpus, dir)?;
    let (rewrites, opp_store, pub_store) = embed_corpus(corpus);
    write_rewrites_ndjson(&rewrites, fs::File::create(dir.join("rewrites.ndjson"))?)?;
    let to_io = |e: polimatch_core::embedding::StoreError| io::Error::other(e.to_string());
    write_store(&opp_store, &dir.join("opportunities.ovec")).map_err(to_io)?;
    write_store(&pub_store, &dir.join("publications.ovec")).map_err(to_io)?;
    Ok(())
}

/// Labelled pairs with quality stepping down at 0.25, 0.30, 0.35 and 0.40.
///
/// Forty grid cells of width `step` start at 0.205, ten per band; every
/// pair in a cell sits at the cell's grid point. Each cell holds
/// `10 * density` pairs with the band's label mix.
pub fn step_function_pairs(step: f64, densities: [u64; 4]) -> Vec<ScoredPair> {
    // Per block of ten: (top, all-positive, relevant).
    let mixes = [(5, 9, 10), (3, 7, 9), (2, 5, 8), (1, 3, 7)];
    let score = |r, e, s| EvalScores::new(r, e, s).expect("scores in range");
    let mut pairs = Vec::new();
    for cell in 0..40u64 {
        let band = (cell / 10) as usize;
        let d = 0.205 + cell as f64 * step;
        let (top, allpos, rel) = mixes[band];
        for block in 0..densities[band] {
            for i in 0..10 {
                let scores = if i < top {
                    score(2, 2, 1)
                } else if i < allpos {
                    score(1, 1, 1)
                } else if i < rel {
                    score(1, 0, 0)
                } else {
                    score(0, 1, 1)
                };
                pairs.push(ScoredPair {
                    opportunity_id: format!("o{cell}"),
                    publication_id: format!("p{block}-{i}"),
                    distance: d,
                    scores,
                });
            }
        }
    }
    pairs
}

/// Densities under which the planted bands are the unique optimum at a
/// minimum tier fraction of 0.15.
pub const STEP_DENSITIES: [u64; 4] = [23, 17, 28, 12];
pub const STEP_MIN_TIER_FRACTION: f64 = 0.15;
