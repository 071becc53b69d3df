#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use polimatch_fixtures::frozen_dir;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_polimatch")
}

pub fn standard_inputs() -> PathBuf {
    frozen_dir().join("standard")
}

pub fn golden_dir() -> PathBuf {
    frozen_dir().join("golden")
}

/// Runs the binary against `data_dir` with a clean environment.
pub fn polimatch(data_dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .arg("--data-dir")
        .arg(data_dir)
        .env_remove("POLIMATCH_DATA_DIR")
        .env_remove("POLIMATCH_PORT")
        .env_remove("OPENALEX_MAILTO")
        .output()
        .expect("binary runs")
}

#[track_caller]
pub fn ok(data_dir: &Path, args: &[&str]) -> Output {
    let out = polimatch(data_dir, args);
    assert!(
        out.status.success(),
        "polimatch {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every stage from raw inputs through reports, using the frozen corpus.
pub fn run_pipeline(data_dir: &Path, extra: &[&str]) {
    let inputs = standard_inputs();
    let opps = inputs.join("opportunities.ndjson");
    let pubs = inputs.join("publications.ndjson");
    let insts = inputs.join("institutions.csv");
    let steps: Vec<Vec<&str>> = vec![
        vec!["ingest-opps", "--input", opps.to_str().unwrap()],
        vec![
            "fetch-openalex",
            "--input",
            pubs.to_str().unwrap(),
            "--institutions",
            insts.to_str().unwrap(),
        ],
        vec!["rewrite"],
        vec!["embed"],
        vec!["build-index"],
        vec!["match"],
        vec!["rank"],
        vec!["coverage"],
        vec!["report", "--json"],
    ];
    for mut step in steps {
        step.extend_from_slice(extra);
        ok(data_dir, &step);
    }
}

/// Relative path to bytes for every file under `dir`, skipping run
/// bookkeeping whose content depends on wall time or location.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
        if rel == "summaries" || rel == "config.json" {
            continue;
        }
        if path.is_dir() {
            walk(root, &path, out);
        } else {
            out.insert(rel, fs::read(&path).unwrap());
        }
    }
}
