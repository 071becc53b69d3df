use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use polimatch_core::analytics::{distribution, Dimension, OpportunityFilter};
use polimatch_core::matching::{rank_researchers, CoverageRow, MatchRecord, OpportunityLabel, Scope};
use polimatch_core::model::{CofogDivision, TierThresholds};
use polimatch_core::vindex::{build_index, SearchConfig};
use polimatch_fixtures::{embed_corpus, small_corpus, write_snapshot_dir, Corpus};
use polimatch_service::pipeline::{coverage_table, institutions_of, match_store, publication_authors, scopes_present};
use polimatch_service::{router, AppState, SnapshotStore};
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

struct Env {
    _dir: TempDir,
    input: std::path::PathBuf,
    store: Arc<SnapshotStore>,
    app: Router,
}

fn publish_env(corpus: &Corpus) -> Env {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in");
    write_snapshot_dir(corpus, &input).unwrap();
    let store = Arc::new(SnapshotStore::open(&dir.path().join("data")).unwrap());
    let meta = store.publish_dir(&input).unwrap();
    assert_eq!(meta.snapshot_id, 1);
    let app = router(AppState { store: store.clone() });
    Env {
        _dir: dir,
        input,
        store,
        app,
    }
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let res = app
        .clone()
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn multipart(parts: &[(&str, Vec<u8>)]) -> (String, Vec<u8>) {
    let boundary = "polimatch-test-boundary";
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        body.extend_from_slice(
            format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n").as_bytes(),
        );
        body.extend_from_slice(b"Content-Type: application/octet-stream\r\n\r\n");
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

fn artifact_parts(dir: &Path) -> Vec<(&'static str, Vec<u8>)> {
    [
        "opportunities.ndjson",
        "rewrites.ndjson",
        "publications.ndjson",
        "opportunities.ovec",
        "publications.ovec",
        "institutions.csv",
    ]
    .into_iter()
    .map(|n| (n, fs::read(dir.join(n)).unwrap()))
    .collect()
}

async fn post_publish(app: &Router, parts: &[(&str, Vec<u8>)]) -> (StatusCode, Value) {
    let (ct, body) = multipart(parts);
    let res = app
        .clone()
        .oneshot(
            Request::post("/admin/publish")
                .header("content-type", ct)
                .body(Body::from(body))
                .unwrap(),
        )
        .await
        .unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn ids(v: &Value) -> Vec<String> {
    v["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["id"].as_str().unwrap().to_string())
        .collect()
}

/// Records computed directly through the matching module, bypassing the store.
fn direct_records(corpus: &Corpus) -> Vec<MatchRecord> {
    let (_, opp, publ) = embed_corpus(corpus);
    let index = build_index(publ).unwrap();
    match_store(&opp, &index, &TierThresholds::default(), SearchConfig::default()).unwrap()
}

fn assert_error(body: &Value, code: &str, field: Option<&str>) {
    assert_eq!(body["error"]["code"], code, "{body}");
    assert_eq!(body["error"]["field"].as_str(), field, "{body}");
    assert!(body["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[tokio::test]
async fn country_and_cofog_filter_selects_the_single_gb_health_record() {
    let env = publish_env(&small_corpus());
    let (status, body) = get(&env.app, "/opportunities?country=GB&cofog=07").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ids(&body), ["op-1"]);
    assert_eq!(body["total"], 1);
    assert_eq!(body["snapshot_id"], 1);

    let (_, body) = get(&env.app, "/opportunities?country=AU").await;
    assert_eq!(ids(&body), ["op-4", "op-5"]);
    let (_, body) = get(&env.app, "/opportunities?country=united%20kingdom&type=Consultation").await;
    assert_eq!(ids(&body), ["op-2", "op-3"]);
}

#[tokio::test]
async fn text_search_is_case_insensitive_substring() {
    let corpus = small_corpus();
    let env = publish_env(&corpus);
    let word = corpus.opportunities[2]
        .title
        .split_whitespace()
        .nth(1)
        .unwrap()
        .to_uppercase();
    let (_, body) = get(&env.app, &format!("/opportunities?q={word}")).await;
    let expected: Vec<String> = corpus
        .opportunities
        .iter()
        .filter(|o| {
            let w = word.to_lowercase();
            o.title.to_lowercase().contains(&w) || o.description.to_lowercase().contains(&w)
        })
        .map(|o| o.id.clone())
        .collect();
    assert!(expected.contains(&"op-3".to_string()));
    assert_eq!(ids(&body), expected);
}

#[tokio::test]
async fn unknown_ids_are_404_and_bad_filters_name_the_field() {
    let env = publish_env(&small_corpus());
    for uri in [
        "/opportunities/op-99",
        "/opportunities/op-99/matches",
        "/opportunities/op-99/researchers",
        "/institutions/I99/coverage",
        "/no/such/route",
    ] {
        let (status, body) = get(&env.app, uri).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_error(&body, "not_found", None);
    }
    for (uri, field) in [
        ("/opportunities?cofog=99", "cofog"),
        ("/opportunities?country=Narnia", "country"),
        ("/opportunities?type=picnic", "type"),
        ("/opportunities?limit=0", "limit"),
        ("/opportunities?colour=red", "colour"),
        ("/analytics/distribution?by=planet", "by"),
        ("/analytics/scatter?mode=absolute&cofog=07", "cofog"),
        ("/analytics/scatter?mode=sideways", "mode"),
        ("/analytics/scatter", "mode"),
        ("/analytics/compare?a=all", "b"),
        ("/analytics/compare?a=all&b=country:ZZZ", "b"),
        ("/analytics/compare?a=nope&b=all", "a"),
        ("/institutions/I1/coverage?cofog=xx", "cofog"),
    ] {
        let (status, body) = get(&env.app, uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        assert_error(&body, "invalid_parameter", Some(field));
    }
    let (status, body) = get(&env.app, "/institutions/I1/coverage?cofog=10").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "empty_scope", Some("cofog"));
}

#[tokio::test]
async fn pages_cover_the_unpaged_result_exactly_once() {
    let corpus = polimatch_fixtures::generate(polimatch_fixtures::CorpusSpec::STANDARD);
    let env = publish_env(&corpus);
    for filter in ["", "country=GB&", "type=Consultation&"] {
        let (_, all) = get(&env.app, &format!("/opportunities?{filter}limit=500")).await;
        let unpaged = ids(&all);
        assert!(all["next_cursor"].is_null());
        let mut sorted = unpaged.clone();
        sorted.sort();
        assert_eq!(unpaged, sorted);
        for limit in [1, 3, 7] {
            let mut seen = Vec::new();
            let mut cursor: Option<String> = None;
            loop {
                let uri = match &cursor {
                    Some(c) => format!("/opportunities?{filter}limit={limit}&cursor={c}"),
                    None => format!("/opportunities?{filter}limit={limit}"),
                };
                let (status, page) = get(&env.app, &uri).await;
                assert_eq!(status, StatusCode::OK);
                let page_ids = ids(&page);
                assert!(page_ids.len() <= limit);
                seen.extend(page_ids);
                match page["next_cursor"].as_str() {
                    Some(c) => cursor = Some(c.to_string()),
                    None => break,
                }
            }
            assert_eq!(seen, unpaged, "filter {filter:?} limit {limit}");
            assert_eq!(seen.iter().collect::<BTreeSet<_>>().len(), seen.len());
        }
    }
}

#[tokio::test]
async fn detail_matches_and_researchers_delegate_to_matching() {
    let corpus = small_corpus();
    let env = publish_env(&corpus);
    let records = direct_records(&corpus);

    let (_, detail) = get(&env.app, "/opportunities/op-1").await;
    assert_eq!(detail["opportunity"]["id"], "op-1");
    assert_eq!(detail["opportunity"]["cofog"], "07");
    assert_eq!(detail["rewrite"]["opportunity_id"], "op-1");

    for o in &corpus.opportunities {
        let expected: Vec<&MatchRecord> = records.iter().filter(|r| r.opportunity_id == o.id).collect();
        let (_, body) = get(&env.app, &format!("/opportunities/{}/matches", o.id)).await;
        let served: Vec<MatchRecord> = serde_json::from_value(body["items"].clone()).unwrap();
        assert_eq!(served.iter().collect::<Vec<_>>(), expected);
        for w in served.windows(2) {
            assert!(w[0].distance <= w[1].distance);
        }

        let owned: Vec<MatchRecord> = expected.into_iter().cloned().collect();
        let ranked = rank_researchers(&owned, &publication_authors(&corpus.publications)).unwrap();
        let (_, body) = get(&env.app, &format!("/opportunities/{}/researchers", o.id)).await;
        assert_eq!(body["items"], serde_json::to_value(&ranked).unwrap());
    }
    let (_, body) = get(&env.app, "/opportunities/op-1/researchers").await;
    assert!(!body["items"].as_array().unwrap().is_empty());
    assert_eq!(body["items"][0]["rank"], 1);
}

#[tokio::test]
async fn coverage_rows_match_the_matching_module() {
    let corpus = small_corpus();
    let env = publish_env(&corpus);
    let records = direct_records(&corpus);
    let labels: Vec<OpportunityLabel> = corpus.opportunities.iter().map(OpportunityLabel::from).collect();
    let insts = institutions_of(&corpus.publications);
    let expected = coverage_table(
        &records,
        &corpus.publications,
        &labels,
        &insts,
        &scopes_present(&labels),
    )
    .unwrap();

    let (status, body) = get(&env.app, "/institutions/I1/coverage?cofog=02").await;
    assert_eq!(status, StatusCode::OK);
    let row: CoverageRow = serde_json::from_value(body.clone()).unwrap();
    let want = expected
        .iter()
        .find(|r| r.institution_id == "I1" && r.scope == Scope::Division(CofogDivision::Defence))
        .unwrap();
    assert_eq!(&row, want);
    assert_eq!(row.n_opportunities, 1);
    assert_eq!(body["scope"], "02");

    for r in &expected {
        let uri = match r.scope {
            Scope::All => format!("/institutions/{}/coverage", r.institution_id),
            Scope::Division(d) => format!("/institutions/{}/coverage?cofog={}", r.institution_id, d.code_str()),
        };
        let (_, body) = get(&env.app, &uri).await;
        assert_eq!(
            body["coverage_pct"].as_f64().unwrap().to_bits(),
            r.coverage_pct.to_bits()
        );
    }

    let (_, body) = get(&env.app, "/institutions").await;
    let items = body["items"].as_array().unwrap();
    assert_eq!(items.len(), 3);
    assert_eq!(items[0]["institution_id"], "I1");
    assert_eq!(items[0]["display_name"], "University 1");
}

#[tokio::test]
async fn analytics_endpoints_return_module_values() {
    let corpus = small_corpus();
    let env = publish_env(&corpus);

    let (_, body) = get(&env.app, "/analytics/distribution?by=cofog&country=GB").await;
    let filter = OpportunityFilter {
        country: Some("GB".into()),
        ..Default::default()
    };
    let want = distribution(&corpus.opportunities, Dimension::Cofog, &filter).unwrap();
    assert_eq!(body["report"], serde_json::to_value(&want).unwrap());
    assert_eq!(body["report"]["total"], 3);

    let (status, body) = get(&env.app, "/analytics/distribution?country=NZ").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&body, "no_records", None);

    let (_, body) = get(&env.app, "/analytics/compare?dimension=cofog&a=country:GB&b=country:AU").await;
    let rows: HashMap<String, (f64, f64)> = body["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            (
                r["label"].as_str().unwrap().to_string(),
                (r["pct_a"].as_f64().unwrap(), r["pct_b"].as_f64().unwrap()),
            )
        })
        .collect();
    assert_eq!(rows["Health"], (100.0 / 3.0, 50.0));
    assert_eq!(rows["Defence"], (100.0 / 3.0, 0.0));
    assert_eq!(rows["Economic Affairs"], (0.0, 50.0));

    let (_, body) = get(&env.app, "/analytics/scatter?mode=absolute").await;
    let points = body["points"].as_array().unwrap();
    assert_eq!(points.len(), 3);
    let stats = env.store.active().unwrap().stats().to_vec();
    for (p, s) in points.iter().zip(&stats) {
        assert_eq!(p["x"], s.n_with_abstracts);
        assert_eq!(p["y"].as_f64().unwrap(), s.n_matched as f64);
    }
    let (_, body) = get(&env.app, "/analytics/scatter?mode=coverage&cofog=07").await;
    assert_eq!(body["scope"], "07");
    let snap = env.store.active().unwrap();
    for p in body["points"].as_array().unwrap() {
        let inst = p["institution_id"].as_str().unwrap();
        let row = snap.coverage_row(inst, Scope::Division(CofogDivision::Health)).unwrap();
        assert_eq!(p["y"].as_f64().unwrap().to_bits(), row.coverage_pct.to_bits());
    }
}

#[tokio::test]
async fn imported_datasets_are_comparable_by_name() {
    let corpus = small_corpus();
    let dir = TempDir::new().unwrap();
    write_snapshot_dir(&corpus, dir.path()).unwrap();
    fs::create_dir_all(dir.path().join("datasets")).unwrap();
    fs::write(
        dir.path().join("datasets/policy_docs.csv"),
        "cofog_code,count\n07,3\n02,1\n",
    )
    .unwrap();
    let store = Arc::new(SnapshotStore::open(&dir.path().join("data")).unwrap());
    store.publish_dir(dir.path()).unwrap();
    let app = router(AppState { store });
    let (status, body) = get(&app, "/analytics/compare?a=all&b=policy_docs").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let health = body["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["label"] == "Health")
        .unwrap();
    assert_eq!(health["pct_a"].as_f64().unwrap(), 40.0);
    assert_eq!(health["pct_b"].as_f64().unwrap(), 75.0);
    let (status, body) = get(&app, "/analytics/compare?dimension=country&a=all&b=policy_docs").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_parameter", Some("dimension"));
}

#[tokio::test]
async fn no_snapshot_is_service_unavailable() {
    let dir = TempDir::new().unwrap();
    let store = Arc::new(SnapshotStore::open(dir.path()).unwrap());
    let app = router(AppState { store });
    let (status, body) = get(&app, "/opportunities").await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_error(&body, "no_snapshot", None);
    let (status, body) = get(&app, "/health").await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["snapshot_id"].is_null());
}

#[tokio::test]
async fn multipart_publish_creates_the_next_snapshot() {
    let env = publish_env(&small_corpus());
    let parts = artifact_parts(&env.input);
    let (status, body) = post_publish(&env.app, &parts).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert_eq!(body["snapshot_id"], 2);
    let (_, body) = get(&env.app, "/snapshot").await;
    assert_eq!(body["snapshot_id"], 2);
    assert_eq!(body["counts"]["opportunities"], 5);
}

#[tokio::test]
async fn corrupt_vectors_fail_publish_and_keep_the_previous_snapshot() {
    let env = publish_env(&small_corpus());
    let (_, before) = get(&env.app, "/opportunities/op-1/matches").await;

    let mut parts = artifact_parts(&env.input);
    let ovec = parts.iter_mut().find(|(n, _)| *n == "publications.ovec").unwrap();
    ovec.1.truncate(ovec.1.len() - 7);
    let (status, body) = post_publish(&env.app, &parts).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&body, "publish_failed", Some("vectors"));

    let mut parts = artifact_parts(&env.input);
    parts.retain(|(n, _)| *n != "opportunities.ndjson");
    let (status, body) = post_publish(&env.app, &parts).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&body, "publish_failed", Some("opportunities"));

    let (status, body) = post_publish(&env.app, &[("secrets.txt", b"x".to_vec())]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&body, "invalid_parameter", Some("secrets.txt"));

    let (_, after) = get(&env.app, "/opportunities/op-1/matches").await;
    assert_eq!(after, before);
    assert_eq!(env.store.active().unwrap().id(), 1);
    assert_eq!(env.store.manifest().snapshots.len(), 1);
    let leftovers: Vec<_> = fs::read_dir(env._dir.path().join("data/snapshots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(leftovers.iter().all(|n| !n.ends_with(".staging")), "{leftovers:?}");
}

#[tokio::test]
async fn reopened_store_serves_the_same_snapshot() {
    let env = publish_env(&small_corpus());
    let (_, before) = get(&env.app, "/opportunities/op-2/matches").await;
    let reopened = Arc::new(SnapshotStore::open(&env._dir.path().join("data")).unwrap());
    let app = router(AppState { store: reopened });
    let (_, after) = get(&app, "/opportunities/op-2/matches").await;
    assert_eq!(after, before);
    assert_eq!(after["snapshot_id"], 1);
}
