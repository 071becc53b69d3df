mod common;

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use common::*;
use polimatch_cli::StageSummary;
use polimatch_core::calibration::write_scored_pairs;
use polimatch_core::matching::{write_coverage_csv, write_matches_csv, OpportunityLabel, Scope};
use polimatch_core::model::CofogDivision;
use polimatch_core::scholar::write_stats;
use polimatch_fixtures::oracle::{brute_matches, coverage_recount, stats_recount};
use polimatch_fixtures::{
    embed_corpus, generate, regenerating, step_function_pairs, CorpusSpec, STEP_DENSITIES, STEP_MIN_TIER_FRACTION,
};

fn summary(dir: &std::path::Path, stage: &str) -> StageSummary {
    serde_json::from_slice(&fs::read(dir.join("summaries").join(format!("{stage}.json"))).unwrap()).unwrap()
}

/// Golden match, coverage and stats tables come from the naive oracle over
/// the same corpus; report goldens are frozen pipeline output.
fn oracle_tables() -> Vec<(&'static str, Vec<u8>)> {
    let corpus = generate(CorpusSpec::STANDARD);
    let (_, opp_store, pub_store) = embed_corpus(&corpus);
    let t = Default::default();
    let matches = brute_matches(&opp_store, &pub_store, &t, 100);
    let mut labels: Vec<OpportunityLabel> = corpus.opportunities.iter().map(OpportunityLabel::from).collect();
    labels.sort_by(|a, b| a.id.cmp(&b.id));
    let institutions: Vec<String> = {
        let mut v: Vec<String> = corpus.institutions.iter().map(|i| i.openalex_id.clone()).collect();
        v.sort();
        v
    };
    let mut scopes = vec![Scope::All];
    scopes.extend(
        CofogDivision::ALL
            .iter()
            .filter(|d| labels.iter().any(|l| l.cofog == **d))
            .map(|d| Scope::Division(*d)),
    );
    let coverage: Vec<_> = scopes
        .iter()
        .flat_map(|s| coverage_recount(&matches, &corpus.publications, &labels, &institutions, *s))
        .collect();
    let stats = stats_recount(&corpus.publications, &matches, &institutions);

    let mut m = Vec::new();
    write_matches_csv(&matches, &mut m).unwrap();
    let mut c = Vec::new();
    write_coverage_csv(&coverage, &mut c).unwrap();
    let mut s = Vec::new();
    write_stats(&stats, &mut s).unwrap();
    vec![("matches.csv", m), ("coverage.csv", c), ("institution_stats.csv", s)]
}

#[test]
fn pipeline_outputs_equal_goldens() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), &[]);
    let golden = golden_dir();
    let out = tree(dir.path());

    if regenerating() {
        for (name, bytes) in oracle_tables() {
            fs::create_dir_all(&golden).unwrap();
            fs::write(golden.join(name), bytes).unwrap();
        }
        fs::create_dir_all(golden.join("reports")).unwrap();
        for (name, bytes) in out
            .iter()
            .filter(|(n, _)| n.starts_with("reports/") && n.ends_with(".csv"))
        {
            fs::write(golden.join(name), bytes).unwrap();
        }
    }

    for (name, oracle) in oracle_tables() {
        let frozen = fs::read(golden.join(name)).unwrap();
        assert!(oracle == frozen, "oracle {name} drifted from the golden file");
        assert!(out[name] == frozen, "pipeline {name} differs from the golden file");
    }
    let mut reports = 0;
    for entry in fs::read_dir(golden.join("reports")).unwrap() {
        let path = entry.unwrap().path();
        let rel = format!("reports/{}", path.file_name().unwrap().to_string_lossy());
        assert!(
            out[&rel] == fs::read(&path).unwrap(),
            "{rel} differs from the golden file"
        );
        reports += 1;
    }
    assert!(reports >= 14);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path(), &[]);
    run_pipeline(b.path(), &[]);
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        assert!(*bytes == tb[name], "{name} differs between runs");
    }
    for stage in ["match", "coverage"] {
        let (sa, sb) = (summary(a.path(), stage), summary(b.path(), stage));
        assert_eq!(
            (sa.config_hash, sa.outputs, sa.counts),
            (sb.config_hash, sb.outputs, sb.counts)
        );
    }
}

#[test]
fn config_change_upstream_stops_downstream_until_forced() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), &[]);
    ok(dir.path(), &["match", "--k", "20"]);

    let out = polimatch(dir.path(), &["coverage"]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("matches.ndjson") && err.contains("--force"), "{err}");

    ok(dir.path(), &["coverage", "--k", "20"]);
    ok(dir.path(), &["coverage", "--force"]);
    assert!(summary(dir.path(), "coverage").forced);

    // Paths never feed the hash: the same config from another data dir agrees.
    let moved = tempfile::tempdir().unwrap();
    for (name, bytes) in tree(dir.path()) {
        let p = moved.path().join(&name);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, bytes).unwrap();
    }
    fs::create_dir_all(moved.path().join("summaries")).unwrap();
    for e in fs::read_dir(dir.path().join("summaries")).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, moved.path().join("summaries").join(p.file_name().unwrap())).unwrap();
    }
    ok(moved.path(), &["coverage", "--k", "20"]);
}

#[test]
fn edited_input_is_reported_as_stale() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), &[]);
    let path = dir.path().join("matches.ndjson");
    let text = fs::read_to_string(&path).unwrap();
    let first_line_end = text.find('\n').unwrap() + 1;
    fs::write(&path, &text[first_line_end..]).unwrap();
    let out = polimatch(dir.path(), &["rank"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed since match"));
}

#[test]
fn missing_upstream_output_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = polimatch(dir.path(), &["match"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("missing input") && err.contains("polimatch embed"),
        "{err}"
    );

    let out = polimatch(dir.path(), &["no-such-stage"]);
    assert_eq!(out.status.code(), Some(2));
    let out = polimatch(dir.path(), &["match", "--k", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_rows_exit_with_validation_code_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.ndjson");
    let good = fs::read_to_string(standard_inputs().join("opportunities.ndjson")).unwrap();
    let mut lines: Vec<&str> = good.lines().take(3).collect();
    lines.push(r#"{"id":"broken","title":""}"#);
    fs::write(&input, lines.join("\n")).unwrap();

    let out = polimatch(dir.path(), &["ingest-opps", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let diag = dir.path().join("diagnostics").join("ingest-opps.json");
    assert!(String::from_utf8_lossy(&out.stderr).contains(diag.to_str().unwrap()));
    let body: serde_json::Value = serde_json::from_slice(&fs::read(&diag).unwrap()).unwrap();
    assert_eq!(body["problems"].as_array().unwrap().len(), 1);
    assert!(!dir.path().join("opportunities.ndjson").exists());

    ok(
        dir.path(),
        &["ingest-opps", "--input", input.to_str().unwrap(), "--skip-invalid"],
    );
    let kept = fs::read_to_string(dir.path().join("opportunities.ndjson")).unwrap();
    assert_eq!(kept.lines().count(), 3);
}

#[test]
fn division_scoped_coverage_counts_only_that_division() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), &[]);
    ok(dir.path(), &["coverage", "--cofog", "07"]);
    let health = generate(CorpusSpec::STANDARD)
        .opportunities
        .iter()
        .filter(|o| o.cofog == CofogDivision::Health)
        .count();
    let csv = fs::read_to_string(dir.path().join("coverage.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    for r in rows {
        assert_eq!(r[1], "07");
        assert_eq!(r[2], health.to_string());
        let covered: u64 = r[3].parse().unwrap();
        assert!(covered as usize <= health);
    }
    ok(dir.path(), &["report", "--cofog", "07"]);
    assert!(dir.path().join("reports/scatter_coverage_07.csv").is_file());
}

#[test]
fn rank_can_target_one_opportunity() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path(), &[]);
    ok(dir.path(), &["rank", "--opportunity", "op-001"]);
    let csv = fs::read_to_string(dir.path().join("researchers.csv")).unwrap();
    let mut prev = (u64::MAX, 0.0f64, String::new());
    for (i, line) in csv.lines().skip(1).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], "op-001");
        assert_eq!(f[1], (i + 1).to_string());
        let cur = (
            f[3].parse::<u64>().unwrap(),
            f[4].parse::<f64>().unwrap(),
            f[2].to_string(),
        );
        assert!(cur.0 < prev.0 || (cur.0 == prev.0 && (cur.1 > prev.1 || (cur.1 == prev.1 && cur.2 > prev.2))));
        prev = cur;
    }
    assert_eq!(
        polimatch(dir.path(), &["rank", "--opportunity", "op-999"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn calibrate_recovers_step_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.csv");
    let mut buf = Vec::new();
    write_scored_pairs(&step_function_pairs(0.005, STEP_DENSITIES), &mut buf).unwrap();
    fs::write(&pairs, buf).unwrap();
    let frac = STEP_MIN_TIER_FRACTION.to_string();
    ok(
        dir.path(),
        &[
            "calibrate",
            "--pairs",
            pairs.to_str().unwrap(),
            "--propose",
            "--grid-step",
            "0.005",
            "--min-tier-fraction",
            &frac,
        ],
    );
    let body: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("calibration/proposed_thresholds.json")).unwrap()).unwrap();
    let t = &body["thresholds"];
    for (key, want) in [("green", 0.25), ("yellow", 0.30), ("orange", 0.35), ("red", 0.40)] {
        let got = t[key].as_f64().unwrap();
        assert!((got - want).abs() <= 0.005 + 1e-12, "{key}: {got} vs {want}");
    }
    assert!(dir.path().join("calibration/quality_table.csv").is_file());
    let mono: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("calibration/monotonicity.json")).unwrap()).unwrap();
    assert!(mono["monotonic"].is_boolean());
}

/// Serves canned OpenAlex pages keyed by cursor; `fail` lists cursors that
/// answer 400 once.
fn fake_openalex(fail: Vec<&'static str>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let log = Arc::new(Mutex::new(Vec::new()));
    let seen = log.clone();
    let fail = Arc::new(Mutex::new(fail));
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap() <= 2 {
                    break;
                }
            }
            let target = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let url = url_cursor(&target);
            seen.lock().unwrap().push(url.clone());
            let failing = {
                let mut f = fail.lock().unwrap();
                match f.iter().position(|c| *c == url) {
                    Some(i) => {
                        f.remove(i);
                        true
                    }
                    None => false,
                }
            };
            let (status, body) = if failing {
                ("400 Bad Request", "{\"error\":\"try later\"}".to_string())
            } else {
                ("200 OK", page_for(&url).to_string())
            };
            let resp = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
            let _ = stream.read(&mut [0u8; 0]);
        }
    });
    (format!("http://{addr}"), log)
}

fn url_cursor(target: &str) -> String {
    let q = target.split_once('?').map(|x| x.1).unwrap_or("");
    q.split('&')
        .find_map(|kv| kv.strip_prefix("cursor="))
        .map(|c| c.replace("%2A", "*"))
        .unwrap_or_default()
}

fn page_for(cursor: &str) -> serde_json::Value {
    let (range, next) = match cursor {
        "*" => (0..3, Some("c1")),
        "c1" => (3..5, None),
        _ => (0..0, None),
    };
    let works: Vec<serde_json::Value> = range
        .map(|i| {
            serde_json::json!({
                "id": format!("https://openalex.org/W{i}"),
                "title": format!("Work {i}"),
                "publication_year": 2022,
                "type": "article",
                "abstract_inverted_index": {"public": [0], "health": [1], "evidence": [2], "matters": [3], "greatly": [4]},
                "authorships": [{"author": {"id": "https://openalex.org/A1"}, "institutions": [{"id": "https://openalex.org/I1"}]}]
            })
        })
        .collect();
    serde_json::json!({"meta": {"next_cursor": next}, "results": works})
}

#[test]
fn online_fetch_resumes_from_saved_cursor() {
    let (base, log) = fake_openalex(vec!["c1"]);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.in.json");
    fs::write(
        &cfg,
        serde_json::json!({ "openalex_base": base, "requests_per_second": 100.0 }).to_string(),
    )
    .unwrap();
    let insts = dir.path().join("inst.csv");
    fs::write(&insts, "openalex_id,display_name,country\nI1,University One,GB\n").unwrap();
    let args = [
        "fetch-openalex",
        "--config",
        cfg.to_str().unwrap(),
        "--institutions",
        insts.to_str().unwrap(),
    ];

    let out = polimatch(dir.path(), &args);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    let state: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("fetch/state.json")).unwrap()).unwrap();
    assert_eq!(state["I1"]["next_cursor"], "c1");
    assert_eq!(state["I1"]["works"], 3);

    ok(dir.path(), &args);
    assert_eq!(*log.lock().unwrap(), ["*", "c1", "c1"]);
    let pubs = fs::read_to_string(dir.path().join("publications.ndjson")).unwrap();
    assert_eq!(pubs.lines().count(), 5);
    assert!(dir.path().join("institutions.csv").is_file());
}

#[test]
fn institutions_without_ids_are_rejected_before_fetching() {
    let dir = tempfile::tempdir().unwrap();
    let insts = dir.path().join("inst.csv");
    fs::write(&insts, "openalex_id,display_name,country\n,Nowhere College,GB\n").unwrap();
    let out = polimatch(
        dir.path(),
        &["fetch-openalex", "--institutions", insts.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(3));
}
