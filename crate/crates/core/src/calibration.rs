//! Pair evaluation labels, tier-quality tables, monotonicity checks and
//! threshold proposal.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{send_with_retry, RetryPolicy, Transport};
use crate::matching::{classify_tier, TierOutcome};
use crate::model::{validate_thresholds, Tier, TierThresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawScores", into = "RawScores")]
pub struct EvalScores {
    relevance: u8,
    expertise: u8,
    scope: u8,
}

#[derive(Serialize, Deserialize)]
struct RawScores {
    relevance: u8,
    expertise: u8,
    scope: u8,
}

impl TryFrom<RawScores> for EvalScores {
    type Error = CalibrationError;

    fn try_from(r: RawScores) -> Result<Self, Self::Error> {
        EvalScores::new(r.relevance, r.expertise, r.scope)
    }
}

impl From<EvalScores> for RawScores {
    fn from(s: EvalScores) -> Self {
        RawScores {
            relevance: s.relevance,
            expertise: s.expertise,
            scope: s.scope,
        }
    }
}

impl EvalScores {
    pub fn new(relevance: u8, expertise: u8, scope: u8) -> Result<Self, CalibrationError> {
        for (dimension, value, max) in [
            ("relevance", relevance, 2),
            ("expertise", expertise, 2),
            ("scope", scope, 1),
        ] {
            if value > max {
                return Err(CalibrationError::ScoreOutOfRange { dimension, value, max });
            }
        }
        Ok(Self {
            relevance,
            expertise,
            scope,
        })
    }

    pub fn relevance(self) -> u8 {
        self.relevance
    }

    pub fn expertise(self) -> u8 {
        self.expertise
    }

    pub fn scope(self) -> u8 {
        self.scope
    }

    pub fn is_top(self) -> bool {
        (self.relevance, self.expertise, self.scope) == (2, 2, 1)
    }

    pub fn is_all_positive(self) -> bool {
        self.relevance >= 1 && self.expertise >= 1 && self.scope == 1
    }

    pub fn is_relevant(self) -> bool {
        self.relevance >= 1
    }
}

/// Equal-weight composite in [0, 1]: `(relevance + expertise + scope) / 5`.
pub fn composite_score(s: EvalScores) -> f64 {
    (s.relevance + s.expertise + s.scope) as f64 / 5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub opportunity_id: String,
    pub publication_id: String,
    pub distance: f64,
    pub scores: EvalScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TopScore,
    AllPositive,
    AtLeastPartial,
    NotRelevant,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::TopScore,
        Metric::AllPositive,
        Metric::AtLeastPartial,
        Metric::NotRelevant,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::TopScore => "Top score (2,2,1)",
            Metric::AllPositive => "All dimensions positive (Rel>=1, Exp>=1, Scope=1)",
            Metric::AtLeastPartial => "At least partially relevant (Rel>=1)",
            Metric::NotRelevant => "Not relevant (Rel=0)",
        }
    }

    /// Quality metrics fall from Green to Red; the not-relevant share rises.
    fn decreasing(self) -> bool {
        self != Metric::NotRelevant
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierQuality {
    pub pct_top_score: f64,
    pub pct_all_positive: f64,
    pub pct_at_least_partial: f64,
    pub pct_not_relevant: f64,
    /// Zero when only published percentages are known.
    pub n_pairs: u64,
}

impl TierQuality {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::TopScore => self.pct_top_score,
            Metric::AllPositive => self.pct_all_positive,
            Metric::AtLeastPartial => self.pct_at_least_partial,
            Metric::NotRelevant => self.pct_not_relevant,
        }
    }
}

/// Per-tier quality rows; `None` marks a tier with no pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierQualityTable {
    pub green: Option<TierQuality>,
    pub yellow: Option<TierQuality>,
    pub orange: Option<TierQuality>,
    pub red: Option<TierQuality>,
    /// Pairs beyond the Red bound, left out of every row.
    pub n_excluded: u64,
}

impl TierQualityTable {
    pub fn row(&self, tier: Tier) -> Option<&TierQuality> {
        match tier {
            Tier::Green => self.green.as_ref(),
            Tier::Yellow => self.yellow.as_ref(),
            Tier::Orange => self.orange.as_ref(),
            Tier::Red => self.red.as_ref(),
        }
    }

    fn from_rows(rows: [Option<TierQuality>; 4], n_excluded: u64) -> Self {
        let [green, yellow, orange, red] = rows;
        Self {
            green,
            yellow,
            orange,
            red,
            n_excluded,
        }
    }

    /// The published evaluation of the production thresholds. Pair counts
    /// are not published and are recorded as zero.
    pub fn published_reference() -> Self {
        let row = |top, all, partial, not| {
            Some(TierQuality {
                pct_top_score: top,
                pct_all_positive: all,
                pct_at_least_partial: partial,
                pct_not_relevant: not,
                n_pairs: 0,
            })
        };
        Self {
            green: row(44.1, 87.5, 97.7, 2.3),
            yellow: row(26.4, 75.3, 92.8, 7.2),
            orange: row(21.0, 68.5, 89.7, 10.3),
            red: row(12.9, 55.0, 81.6, 18.4),
            n_excluded: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Fewer than four distinct usable cut-points on the grid.
    Grid,
    Occupancy,
    Monotonicity,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::Grid => "grid (fewer than four distinct cut-points)",
            Constraint::Occupancy => "minimum tier occupancy",
            Constraint::Monotonicity => "monotonic quality gradient",
        })
    }
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("{dimension} score {value} outside 0..={max}")]
    ScoreOutOfRange {
        dimension: &'static str,
        value: u8,
        max: u8,
    },
    #[error("no scored pairs")]
    NoPairs,
    #[error("invalid distance {distance} for pair ({opportunity_id}, {publication_id})")]
    InvalidDistance {
        opportunity_id: String,
        publication_id: String,
        distance: f64,
    },
    #[error("tier {0} has no pairs")]
    EmptyTier(Tier),
    #[error("threshold proposal needs at least {needed} pairs, got {got}")]
    TooFewPairs { needed: usize, got: usize },
    #[error("grid step must be in (0, 0.01], got {0}")]
    InvalidGridStep(f64),
    #[error("minimum tier fraction must be in [0, 0.25], got {0}")]
    InvalidTierFraction(f64),
    #[error("no feasible thresholds: {0} cannot be satisfied")]
    Infeasible(Constraint),
    #[error("scorer failed for ({opportunity_id}, {publication_id}): {message}")]
    Scorer {
        opportunity_id: String,
        publication_id: String,
        message: String,
    },
    #[error("invalid scored-pair row {line}: {message}")]
    InvalidRow { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Percentage used by every quality computation, so results agree bit for bit.
fn pct(count: u64, n: u64) -> f64 {
    100.0 * count as f64 / n as f64
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    n: u64,
    top: u64,
    all_positive: u64,
    relevant: u64,
}

impl Tally {
    fn add(&mut self, s: EvalScores) {
        self.n += 1;
        self.top += s.is_top() as u64;
        self.all_positive += s.is_all_positive() as u64;
        self.relevant += s.is_relevant() as u64;
    }

    fn minus(self, o: Tally) -> Tally {
        Tally {
            n: self.n - o.n,
            top: self.top - o.top,
            all_positive: self.all_positive - o.all_positive,
            relevant: self.relevant - o.relevant,
        }
    }

    fn quality(self) -> Option<TierQuality> {
        (self.n > 0).then(|| TierQuality {
            pct_top_score: pct(self.top, self.n),
            pct_all_positive: pct(self.all_positive, self.n),
            pct_at_least_partial: pct(self.relevant, self.n),
            pct_not_relevant: pct(self.n - self.relevant, self.n),
            n_pairs: self.n,
        })
    }
}

fn check_distance(p: &ScoredPair) -> Result<(), CalibrationError> {
    if !(p.distance >= 0.0) || !p.distance.is_finite() {
        return Err(CalibrationError::InvalidDistance {
            opportunity_id: p.opportunity_id.clone(),
            publication_id: p.publication_id.clone(),
            distance: p.distance,
        });
    }
    Ok(())
}

/// Tiers every pair and computes the four quality shares per tier.
pub fn evaluate_tiers(pairs: &[ScoredPair], t: &TierThresholds) -> Result<TierQualityTable, CalibrationError> {
    if pairs.is_empty() {
        return Err(CalibrationError::NoPairs);
    }
    let mut tallies = [Tally::default(); 4];
    let mut excluded = 0;
    for p in pairs {
        check_distance(p)?;
        match classify_tier(p.distance, t).expect("distance checked") {
            TierOutcome::Tier(tier) => tallies[tier.index()].add(p.scores),
            TierOutcome::Excluded => excluded += 1,
        }
    }
    Ok(TierQualityTable::from_rows(tallies.map(Tally::quality), excluded))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub top_score: bool,
    pub all_positive: bool,
    pub at_least_partial: bool,
    pub not_relevant: bool,
}

impl MonotonicityReport {
    pub fn verdict(&self, m: Metric) -> bool {
        match m {
            Metric::TopScore => self.top_score,
            Metric::AllPositive => self.all_positive,
            Metric::AtLeastPartial => self.at_least_partial,
            Metric::NotRelevant => self.not_relevant,
        }
    }

    pub fn is_monotonic(&self) -> bool {
        Metric::ALL.iter().all(|&m| self.verdict(m))
    }

    pub fn failing(&self) -> Vec<Metric> {
        Metric::ALL.into_iter().filter(|&m| !self.verdict(m)).collect()
    }
}

fn rows_monotonic(rows: &[TierQuality; 4], m: Metric) -> bool {
    rows.windows(2).all(|w| {
        let (a, b) = (w[0].get(m), w[1].get(m));
        if m.decreasing() {
            a >= b
        } else {
            a <= b
        }
    })
}

/// Non-strict check: quality shares never rise and the not-relevant share
/// never falls from Green to Red.
pub fn is_monotonic(table: &TierQualityTable) -> Result<MonotonicityReport, CalibrationError> {
    let mut rows = Vec::with_capacity(4);
    for tier in Tier::ALL {
        rows.push(*table.row(tier).ok_or(CalibrationError::EmptyTier(tier))?);
    }
    let rows: [TierQuality; 4] = rows.try_into().expect("four tiers");
    Ok(MonotonicityReport {
        top_score: rows_monotonic(&rows, Metric::TopScore),
        all_positive: rows_monotonic(&rows, Metric::AllPositive),
        at_least_partial: rows_monotonic(&rows, Metric::AtLeastPartial),
        not_relevant: rows_monotonic(&rows, Metric::NotRelevant),
    })
}

pub const MIN_PROPOSAL_PAIRS: usize = 100;
pub const MAX_GRID_STEP: f64 = 0.01;

/// A grid cut-point: its grid index and the cumulative tally of pairs at or
/// below it.
#[derive(Clone, Copy)]
struct Cut {
    index: u64,
    value: f64,
    below: Tally,
}

/// Searches 4-tuples of grid points `min_d + j * grid_step` for thresholds
/// whose tiers are monotonic in quality and each hold at least
/// `min_tier_fraction` of all pairs, maximising the smallest drop in the
/// all-positive share between adjacent tiers. Ties go to the
/// lexicographically smallest tuple.
///
/// Grid points that tier the pairs identically are collapsed to the first
/// such point, so the search cost depends on the number of distinct cuts
/// rather than on the grid resolution.
pub fn propose_thresholds(
    pairs: &[ScoredPair],
    grid_step: f64,
    min_tier_fraction: f64,
) -> Result<TierThresholds, CalibrationError> {
    if pairs.len() < MIN_PROPOSAL_PAIRS {
        return Err(CalibrationError::TooFewPairs {
            needed: MIN_PROPOSAL_PAIRS,
            got: pairs.len(),
        });
    }
    if !(grid_step > 0.0 && grid_step <= MAX_GRID_STEP) {
        return Err(CalibrationError::InvalidGridStep(grid_step));
    }
    if !(0.0..=0.25).contains(&min_tier_fraction) {
        return Err(CalibrationError::InvalidTierFraction(min_tier_fraction));
    }
    for p in pairs {
        check_distance(p)?;
    }
    let mut sorted: Vec<&ScoredPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let min_d = sorted[0].distance;
    let max_d = sorted[sorted.len() - 1].distance;
    let n_total = sorted.len() as u64;

    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    let mut running = Tally::default();
    prefix.push(running);
    for p in &sorted {
        running.add(p.scores);
        prefix.push(running);
    }

    let grid = |j: u64| min_d + j as f64 * grid_step;
    let last = {
        let mut j = ((max_d - min_d) / grid_step).ceil() as u64;
        while grid(j) < max_d {
            j += 1;
        }
        j
    };
    let mut first_positive = 0;
    while grid(first_positive) <= 0.0 {
        first_positive += 1;
    }
    // First grid index at or above a distance.
    let index_for = |d: f64| -> u64 {
        let mut j = ((d - min_d) / grid_step).ceil().max(0.0) as u64;
        while j > 0 && grid(j - 1) >= d {
            j -= 1;
        }
        while grid(j) < d {
            j += 1;
        }
        j
    };

    let mut starts: Vec<u64> = sorted
        .iter()
        .map(|p| index_for(p.distance).max(first_positive))
        .collect();
    starts.push(first_positive);
    starts.retain(|&j| j <= last);
    starts.sort_unstable();
    starts.dedup();
    let mut cuts: Vec<Cut> = Vec::new();
    for j in starts {
        let value = grid(j);
        let k = sorted.partition_point(|p| p.distance <= value);
        if k == 0 || cuts.last().is_some_and(|c| c.below.n == k as u64) {
            continue;
        }
        cuts.push(Cut {
            index: j,
            value,
            below: prefix[k],
        });
    }
    if cuts.len() < 4 {
        return Err(CalibrationError::Infeasible(Constraint::Grid));
    }

    let occupied = |t: &Tally| t.n > 0 && t.n as f64 / n_total as f64 >= min_tier_fraction;
    let qualities = |c: &[Cut; 4]| -> [TierQuality; 4] {
        let mut prev = Tally::default();
        c.map(|cut| {
            let q = cut.below.minus(prev).quality().expect("occupied tier");
            prev = cut.below;
            q
        })
    };

    #[derive(Clone, Copy)]
    struct Best {
        gap: f64,
        tuple: [u64; 4],
        values: [f64; 4],
    }
    let better = |a: Option<Best>, b: Option<Best>| match (a, b) {
        (Some(x), Some(y)) => {
            if y.gap > x.gap || (y.gap == x.gap && y.tuple < x.tuple) {
                Some(y)
            } else {
                Some(x)
            }
        }
        (x, None) => x,
        (None, y) => y,
    };

    let (best, any_occupied) = (0..cuts.len())
        .into_par_iter()
        .map(|a| {
            let mut best: Option<Best> = None;
            let mut any_occupied = false;
            let green = cuts[a].below;
            if !occupied(&green) {
                return (best, any_occupied);
            }
            for b in a + 1..cuts.len() {
                let yellow = cuts[b].below.minus(green);
                if !occupied(&yellow) {
                    continue;
                }
                for c in b + 1..cuts.len() {
                    let orange = cuts[c].below.minus(cuts[b].below);
                    if !occupied(&orange) {
                        continue;
                    }
                    for d in c + 1..cuts.len() {
                        let red = cuts[d].below.minus(cuts[c].below);
                        if !occupied(&red) {
                            continue;
                        }
                        any_occupied = true;
                        let chosen = [cuts[a], cuts[b], cuts[c], cuts[d]];
                        let rows = qualities(&chosen);
                        if !Metric::ALL.iter().all(|&m| rows_monotonic(&rows, m)) {
                            continue;
                        }
                        let gap = rows
                            .windows(2)
                            .map(|w| w[0].pct_all_positive - w[1].pct_all_positive)
                            .fold(f64::INFINITY, f64::min);
                        best = better(
                            best,
                            Some(Best {
                                gap,
                                tuple: chosen.map(|c| c.index),
                                values: chosen.map(|c| c.value),
                            }),
                        );
                    }
                }
            }
            (best, any_occupied)
        })
        .reduce(|| (None, false), |x, y| (better(x.0, y.0), x.1 || y.1));

    let Some(best) = best else {
        return Err(CalibrationError::Infeasible(if any_occupied {
            Constraint::Monotonicity
        } else {
            Constraint::Occupancy
        }));
    };
    let [green, yellow, orange, red] = best.values;
    Ok(validate_thresholds(TierThresholds {
        green,
        yellow,
        orange,
        red,
    })
    .expect("grid cut-points are positive and increasing"))
}

/// Scores an (opportunity, publication) pair on the three label dimensions.
pub trait PairScorer: Send + Sync {
    fn score(&self, opportunity_text: &str, publication_text: &str) -> Result<EvalScores, String>;
}

/// HTTP scorer: `POST {opportunity, publication}` returning
/// `{relevance, expertise, scope}`.
pub struct RemotePairScorer {
    transport: Arc<dyn Transport>,
    url: String,
    retry: RetryPolicy,
}

impl RemotePairScorer {
    pub fn new(transport: Arc<dyn Transport>, url: impl Into<String>, retry: RetryPolicy) -> Self {
        Self {
            transport,
            url: url.into(),
            retry,
        }
    }
}

impl PairScorer for RemotePairScorer {
    fn score(&self, opportunity_text: &str, publication_text: &str) -> Result<EvalScores, String> {
        let body = serde_json::json!({"opportunity": opportunity_text, "publication": publication_text});
        let resp =
            send_with_retry(&self.retry, || self.transport.post_json(&self.url, &body)).map_err(|e| e.to_string())?;
        serde_json::from_slice(&resp.body).map_err(|e| e.to_string())
    }
}

#[derive(Deserialize)]
struct PairRow {
    opportunity_id: String,
    publication_id: String,
    distance: f64,
    relevance: u8,
    expertise: u8,
    scope: u8,
}

pub fn read_scored_pairs<R: Read>(source: R) -> Result<Vec<ScoredPair>, CalibrationError> {
    let mut rdr = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<PairRow>().enumerate() {
        let line = i + 2;
        let row = row?;
        let scores =
            EvalScores::new(row.relevance, row.expertise, row.scope).map_err(|e| CalibrationError::InvalidRow {
                line,
                message: e.to_string(),
            })?;
        let pair = ScoredPair {
            opportunity_id: row.opportunity_id,
            publication_id: row.publication_id,
            distance: row.distance,
            scores,
        };
        check_distance(&pair).map_err(|e| CalibrationError::InvalidRow {
            line,
            message: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn write_scored_pairs<W: Write>(pairs: &[ScoredPair], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "opportunity_id",
        "publication_id",
        "distance",
        "relevance",
        "expertise",
        "scope",
    ])?;
    for p in pairs {
        w.write_record([
            p.opportunity_id.clone(),
            p.publication_id.clone(),
            p.distance.to_string(),
            p.scores.relevance.to_string(),
            p.scores.expertise.to_string(),
            p.scores.scope.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Metrics as rows and tiers as columns, percentages to one decimal place,
/// with a trailing `n_pairs` row. Empty tiers leave blank cells.
pub fn write_quality_table<W: Write>(table: &TierQualityTable, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "Green", "Yellow", "Orange", "Red"])?;
    for m in Metric::ALL {
        let mut row = vec![m.label().to_string()];
        row.extend(Tier::ALL.map(|t| table.row(t).map(|q| format!("{:.1}", q.get(m))).unwrap_or_default()));
        w.write_record(&row)?;
    }
    let mut row = vec!["n_pairs".to_string()];
    row.extend(Tier::ALL.map(|t| table.row(t).map(|q| q.n_pairs.to_string()).unwrap_or_default()));
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}
