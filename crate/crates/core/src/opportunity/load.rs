//! NDJSON / CSV ingestion of raw opportunity records.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::cofog::CofogClassifier;
use crate::model::{resolve_country, validate_opportunity, CofogDivision, Opportunity, OpportunityType, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Ndjson,
    Csv,
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ndjson" | "jsonl" => Ok(InputFormat::Ndjson),
            "csv" => Ok(InputFormat::Csv),
            other => Err(format!("unknown input format {other:?} (expected ndjson or csv)")),
        }
    }
}

impl InputFormat {
    pub fn from_path(path: &std::path::Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ndjson" | "jsonl" => Some(InputFormat::Ndjson),
            "csv" => Some(InputFormat::Csv),
            _ => None,
        }
    }
}

/// Source row as found in the input; every field optional so that missing
/// columns surface as row errors rather than parse failures.
#[derive(Debug, Clone, Default, Deserialize)]
struct RawOpportunity {
    id: Option<String>,
    title: Option<String>,
    description: Option<String>,
    organisation: Option<String>,
    country: Option<String>,
    opportunity_type: Option<String>,
    cofog: Option<serde_json::Value>,
    source_url: Option<String>,
    contact: Option<String>,
    deadline: Option<String>,
    published_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowErrorKind {
    Malformed { message: String },
    Invalid { violations: Vec<Violation> },
    DuplicateId { id: String, first_line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub line: usize,
    #[serde(flatten)]
    pub kind: RowErrorKind,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            RowErrorKind::Malformed { message } => write!(f, "line {}: {message}", self.line),
            RowErrorKind::Invalid { violations } => {
                let parts: Vec<String> = violations.iter().map(ToString::to_string).collect();
                write!(f, "line {}: {}", self.line, parts.join("; "))
            }
            RowErrorKind::DuplicateId { id, first_line } => {
                write!(
                    f,
                    "line {}: duplicate id {id:?} (first seen on line {first_line})",
                    self.line
                )
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub records: Vec<Opportunity>,
    pub errors: Vec<RowError>,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("input is not valid UTF-8: {0}")]
    Utf8(#[from] std::string::FromUtf8Error),
    #[error("CSV header: {0}")]
    CsvHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.map(|v| v.trim().to_string()).filter(|v| !v.is_empty())
}

fn convert(raw: RawOpportunity, classifier: Option<&dyn CofogClassifier>) -> Result<Opportunity, RowErrorKind> {
    let mut missing = Vec::new();
    let mut require = |name: &str, v: Option<String>| -> String {
        match v {
            Some(s) => s,
            None => {
                missing.push(Violation {
                    field: name.to_string(),
                    rule: "missing".into(),
                    value: String::new(),
                });
                String::new()
            }
        }
    };
    // id, country, source_url and description may be present-but-empty; the
    // validator reports those. Absent keys are reported here.
    let id = require("id", raw.id);
    let title = require("title", raw.title);
    let description = require("description", raw.description);
    let organisation = require("organisation", raw.organisation);
    let country = require("country", raw.country);
    let source_url = require("source_url", raw.source_url);
    let type_str = require("opportunity_type", raw.opportunity_type);
    if !missing.is_empty() {
        return Err(RowErrorKind::Invalid { violations: missing });
    }
    let country = resolve_country(&country);
    let opportunity_type =
        OpportunityType::parse_for_country(&type_str, Some(&country)).map_err(|e| RowErrorKind::Invalid {
            violations: vec![Violation {
                field: "opportunity_type".into(),
                rule: "unknown type".into(),
                value: e.value,
            }],
        })?;
    let manual = match raw.cofog {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) if s.trim().is_empty() => None,
        Some(v) => Some(
            serde_json::from_value::<CofogDivision>(v.clone()).map_err(|_| RowErrorKind::Invalid {
                violations: vec![Violation {
                    field: "cofog".into(),
                    rule: "unknown COFOG division".into(),
                    value: match v {
                        serde_json::Value::String(s) => s,
                        other => other.to_string(),
                    },
                }],
            })?,
        ),
    };
    let cofog = match (manual, classifier) {
        (Some(c), _) => c,
        (None, Some(clf)) => super::classify_cofog(&format!("{title}\n{description}"), None, clf).map_err(|e| {
            RowErrorKind::Malformed {
                message: format!("cofog classification failed: {e}"),
            }
        })?,
        (None, None) => {
            return Err(RowErrorKind::Invalid {
                violations: vec![Violation {
                    field: "cofog".into(),
                    rule: "missing and no classifier configured".into(),
                    value: String::new(),
                }],
            })
        }
    };
    let record = Opportunity {
        id,
        title,
        description,
        organisation,
        country,
        opportunity_type,
        cofog,
        source_url,
        contact: non_empty(raw.contact),
        deadline: non_empty(raw.deadline),
        published_at: non_empty(raw.published_at),
    };
    validate_opportunity(record).map_err(|v| RowErrorKind::Invalid { violations: v.0 })
}

/// Reads opportunities from a byte stream. Bad rows are collected with their
/// 1-based line number and loading continues; the first occurrence of an id
/// wins and later duplicates are rejected.
///
/// Records without a `cofog` value are classified with `classifier` when one
/// is supplied.
pub fn load_opportunities<R: Read>(
    mut source: R,
    format: InputFormat,
    classifier: Option<&dyn CofogClassifier>,
) -> Result<LoadReport, LoadError> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    let text = String::from_utf8(buf)?;

    let rows: Vec<(usize, Result<RawOpportunity, String>)> = match format {
        InputFormat::Ndjson => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                (
                    i + 1,
                    serde_json::from_str::<RawOpportunity>(l).map_err(|e| e.to_string()),
                )
            })
            .collect(),
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
            let headers = rdr.headers().map_err(|e| LoadError::CsvHeader(e.to_string()))?.clone();
            rdr.records()
                .map(|rec| match rec {
                    Ok(rec) => {
                        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                        (
                            line,
                            rec.deserialize::<RawOpportunity>(Some(&headers))
                                .map_err(|e| e.to_string()),
                        )
                    }
                    Err(e) => (e.position().map(|p| p.line() as usize).unwrap_or(0), Err(e.to_string())),
                })
                .collect()
        }
    };

    let mut report = LoadReport::default();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for (line, row) in rows {
        let outcome = row
            .map_err(|message| RowErrorKind::Malformed { message })
            .and_then(|raw| convert(raw, classifier));
        match outcome {
            Ok(op) => {
                if let Some(&first_line) = first_seen.get(&op.id) {
                    report.errors.push(RowError {
                        line,
                        kind: RowErrorKind::DuplicateId { id: op.id, first_line },
                    });
                } else {
                    first_seen.insert(op.id.clone(), line);
                    report.records.push(op);
                }
            }
            Err(kind) => report.errors.push(RowError { line, kind }),
        }
    }
    Ok(report)
}

/// Serialises records as NDJSON in the same schema the loader reads.
pub fn write_opportunities_ndjson<W: Write>(records: &[Opportunity], mut out: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
