//! Categorical distributions, paired comparisons and institution scatter
//! exports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matching::{CoverageRow, Scope};
use crate::model::{CofogDivision, Opportunity, OpportunityType};
use crate::scholar::InstitutionStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Cofog,
    Country,
    OpportunityType,
}

impl Dimension {
    pub fn name(self) -> &'static str {
        match self {
            Dimension::Cofog => "cofog",
            Dimension::Country => "country",
            Dimension::OpportunityType => "opportunity_type",
        }
    }

    pub fn label_of(self, o: &Opportunity) -> String {
        match self {
            Dimension::Cofog => o.cofog.name().to_string(),
            Dimension::Country => o.country.clone(),
            Dimension::OpportunityType => o.opportunity_type.name().to_string(),
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dimension {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "cofog" => Ok(Dimension::Cofog),
            "country" => Ok(Dimension::Country),
            "opportunity_type" | "type" => Ok(Dimension::OpportunityType),
            _ => Err(AnalyticsError::UnknownDimension(s.to_string())),
        }
    }
}

/// Conjunctive record filter; `None` fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpportunityFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub country: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opportunity_type: Option<OpportunityType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cofog: Option<CofogDivision>,
}

impl OpportunityFilter {
    pub fn matches(&self, o: &Opportunity) -> bool {
        self.country
            .as_deref()
            .is_none_or(|c| c.eq_ignore_ascii_case(&o.country))
            && self.opportunity_type.is_none_or(|t| t == o.opportunity_type)
            && self.cofog.is_none_or(|c| c == o.cofog)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub count: u64,
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub dimension: Dimension,
    pub buckets: Vec<Bucket>,
    pub total: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("no records to summarise")]
    Empty,
    #[error("cannot compare a {a} distribution with a {b} distribution")]
    DimensionMismatch { a: Dimension, b: Dimension },
    #[error("unknown dimension {0:?}")]
    UnknownDimension(String),
    #[error("no coverage row for institution {institution_id:?} in scope {scope}")]
    MissingCoverage { institution_id: String, scope: Scope },
    #[error("absolute scatter counts are only defined for scope all, got {0}")]
    AbsoluteScope(Scope),
    #[error("invalid count table row {line}: {message}")]
    InvalidRow { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Builds a report from label counts: count-descending, then label order.
pub fn distribution_from_counts(
    dimension: Dimension,
    counts: BTreeMap<String, u64>,
) -> Result<DistributionReport, AnalyticsError> {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return Err(AnalyticsError::Empty);
    }
    let mut buckets: Vec<Bucket> = counts
        .into_iter()
        .filter(|(_, c)| *c > 0)
        .map(|(label, count)| Bucket {
            label,
            count,
            pct: 100.0 * count as f64 / total as f64,
        })
        .collect();
    buckets.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
    Ok(DistributionReport {
        dimension,
        buckets,
        total,
        notes: Vec::new(),
    })
}

/// Counts records per label within the filtered subset.
pub fn distribution(
    records: &[Opportunity],
    by: Dimension,
    filter: &OpportunityFilter,
) -> Result<DistributionReport, AnalyticsError> {
    let mut counts = BTreeMap::new();
    for o in records.iter().filter(|o| filter.matches(o)) {
        *counts.entry(by.label_of(o)).or_insert(0) += 1;
    }
    distribution_from_counts(by, counts)
}

/// One distribution per value of `group_by` (e.g. COFOG mix within each
/// opportunity type). Groups with no records are omitted.
pub fn grouped_distribution(
    records: &[Opportunity],
    group_by: Dimension,
    by: Dimension,
    filter: &OpportunityFilter,
) -> Result<BTreeMap<String, DistributionReport>, AnalyticsError> {
    let mut groups: BTreeMap<String, Vec<Opportunity>> = BTreeMap::new();
    for o in records.iter().filter(|o| filter.matches(o)) {
        groups.entry(group_by.label_of(o)).or_default().push(o.clone());
    }
    if groups.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    groups
        .into_iter()
        .map(|(g, recs)| distribution(&recs, by, &OpportunityFilter::default()).map(|r| (g, r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub pct_a: f64,
    pub pct_b: f64,
    pub delta: f64,
}

/// Pairs shares over the union of labels (missing labels count as 0%),
/// ordered by label.
pub fn compare_distributions(
    a: &DistributionReport,
    b: &DistributionReport,
) -> Result<Vec<ComparisonRow>, AnalyticsError> {
    if a.dimension != b.dimension {
        return Err(AnalyticsError::DimensionMismatch {
            a: a.dimension,
            b: b.dimension,
        });
    }
    let pa: HashMap<&str, f64> = a.buckets.iter().map(|x| (x.label.as_str(), x.pct)).collect();
    let pb: HashMap<&str, f64> = b.buckets.iter().map(|x| (x.label.as_str(), x.pct)).collect();
    let labels: BTreeSet<&str> = pa.keys().chain(pb.keys()).copied().collect();
    Ok(labels
        .into_iter()
        .map(|l| {
            let (x, y) = (pa.get(l).copied().unwrap_or(0.0), pb.get(l).copied().unwrap_or(0.0));
            ComparisonRow {
                label: l.to_string(),
                pct_a: x,
                pct_b: y,
                delta: x - y,
            }
        })
        .collect())
}

/// Reads an external `cofog_code,count` table (e.g. policy-document counts)
/// into a COFOG distribution labelled by division name.
pub fn read_cofog_counts<R: Read>(source: R) -> Result<DistributionReport, AnalyticsError> {
    #[derive(Deserialize)]
    struct Row {
        cofog_code: String,
        count: u64,
    }
    let mut rdr = csv::Reader::from_reader(source);
    let mut counts = BTreeMap::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row?;
        let div: CofogDivision =
            row.cofog_code
                .parse()
                .map_err(|e: crate::model::ParseEnumError| AnalyticsError::InvalidRow {
                    line,
                    message: e.to_string(),
                })?;
        *counts.entry(div.name().to_string()).or_insert(0) += row.count;
    }
    let mut report = distribution_from_counts(Dimension::Cofog, counts)?;
    report.notes.push("imported count table".into());
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterMode {
    Absolute,
    Coverage,
}

impl FromStr for ScatterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "absolute" => Ok(ScatterMode::Absolute),
            "coverage" => Ok(ScatterMode::Coverage),
            other => Err(format!("unknown scatter mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub institution_id: String,
    /// Works with a usable abstract.
    pub x: u64,
    pub y: f64,
    pub scope: Scope,
}

/// One point per institution. In absolute mode `y` is the institution's
/// Green-matched work count; in coverage mode it is taken verbatim from the
/// matching coverage row.
pub fn scatter(
    stats: &[InstitutionStats],
    coverage: &[CoverageRow],
    mode: ScatterMode,
    scope: Scope,
) -> Result<Vec<ScatterPoint>, AnalyticsError> {
    match mode {
        ScatterMode::Absolute => {
            if scope != Scope::All {
                return Err(AnalyticsError::AbsoluteScope(scope));
            }
            Ok(stats
                .iter()
                .map(|s| ScatterPoint {
                    institution_id: s.institution_id.clone(),
                    x: s.n_with_abstracts,
                    y: s.n_matched as f64,
                    scope,
                })
                .collect())
        }
        ScatterMode::Coverage => {
            let rows: HashMap<&str, &CoverageRow> = coverage
                .iter()
                .filter(|r| r.scope == scope)
                .map(|r| (r.institution_id.as_str(), r))
                .collect();
            stats
                .iter()
                .map(|s| {
                    let row = rows
                        .get(s.institution_id.as_str())
                        .ok_or_else(|| AnalyticsError::MissingCoverage {
                            institution_id: s.institution_id.clone(),
                            scope,
                        })?;
                    Ok(ScatterPoint {
                        institution_id: s.institution_id.clone(),
                        x: s.n_with_abstracts,
                        y: row.coverage_pct,
                        scope,
                    })
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum Report {
    Distribution(DistributionReport),
    Comparison {
        dimension: Dimension,
        label_a: String,
        label_b: String,
        rows: Vec<ComparisonRow>,
    },
    Scatter {
        mode: ScatterMode,
        points: Vec<ScatterPoint>,
    },
    Stats(Vec<InstitutionStats>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

fn one_decimal(x: f64) -> String {
    format!("{x:.1}")
}

/// CSV with display rounding (one decimal for percentages, exact counts).
pub fn report_csv<W: Write>(report: &Report, out: W) -> Result<(), AnalyticsError> {
    let mut w = csv::Writer::from_writer(out);
    match report {
        Report::Distribution(d) => {
            w.write_record([d.dimension.name(), "count", "pct"])?;
            for b in &d.buckets {
                w.write_record([b.label.clone(), b.count.to_string(), one_decimal(b.pct)])?;
            }
        }
        Report::Comparison {
            dimension,
            label_a,
            label_b,
            rows,
        } => {
            w.write_record([
                dimension.name().to_string(),
                format!("pct_{label_a}"),
                format!("pct_{label_b}"),
                "delta".to_string(),
            ])?;
            for r in rows {
                w.write_record([
                    r.label.clone(),
                    one_decimal(r.pct_a),
                    one_decimal(r.pct_b),
                    one_decimal(r.delta),
                ])?;
            }
        }
        Report::Scatter { mode, points } => {
            w.write_record(["institution_id", "scope", "x", "y"])?;
            for p in points {
                let y = match mode {
                    ScatterMode::Absolute => format!("{}", p.y as u64),
                    ScatterMode::Coverage => one_decimal(p.y),
                };
                w.write_record([p.institution_id.clone(), p.scope.to_string(), p.x.to_string(), y])?;
            }
        }
        Report::Stats(stats) => {
            w.write_record(["institution_id", "n_publications", "n_with_abstracts", "n_matched"])?;
            for s in stats {
                w.write_record([
                    s.institution_id.clone(),
                    s.n_publications.to_string(),
                    s.n_with_abstracts.to_string(),
                    s.n_matched.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Machine format: raw values, stable key order, trailing newline.
pub fn report_json(report: &Report) -> Result<String, AnalyticsError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn export_report(report: &Report, path: &Path, format: ReportFormat) -> Result<(), AnalyticsError> {
    let bytes = match format {
        ReportFormat::Json => report_json(report)?.into_bytes(),
        ReportFormat::Csv => {
            let mut buf = Vec::new();
            report_csv(report, &mut buf)?;
            buf
        }
    };
    fs::write(path, bytes).map_err(|source| AnalyticsError::Write {
        path: path.display().to_string(),
        source,
    })
}
