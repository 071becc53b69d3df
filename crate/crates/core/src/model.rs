//! Canonical domain types shared by every stage of the pipeline.
//!
//! Everything here is a plain value: construct it, validate it, pass it
//! around. Validation functions collect every violation rather than stopping
//! at the first one so that batch ingestion can report all problems at once.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Top-level COFOG division (Classification of the Functions of Government).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CofogDivision {
    GeneralPublicServices,
    Defence,
    PublicOrderAndSafety,
    EconomicAffairs,
    EnvironmentalProtection,
    HousingAndCommunityAmenities,
    Health,
    RecreationCultureAndReligion,
    Education,
    SocialProtection,
}

impl CofogDivision {
    pub const ALL: [CofogDivision; 10] = [
        CofogDivision::GeneralPublicServices,
        CofogDivision::Defence,
        CofogDivision::PublicOrderAndSafety,
        CofogDivision::EconomicAffairs,
        CofogDivision::EnvironmentalProtection,
        CofogDivision::HousingAndCommunityAmenities,
        CofogDivision::Health,
        CofogDivision::RecreationCultureAndReligion,
        CofogDivision::Education,
        CofogDivision::SocialProtection,
    ];

    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    /// Two-digit code as used in COFOG tables ("07").
    pub fn code_str(self) -> String {
        format!("{:02}", self.code())
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1..=10 => Some(Self::ALL[(code - 1) as usize]),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CofogDivision::GeneralPublicServices => "General Public Services",
            CofogDivision::Defence => "Defence",
            CofogDivision::PublicOrderAndSafety => "Public Order and Safety",
            CofogDivision::EconomicAffairs => "Economic Affairs",
            CofogDivision::EnvironmentalProtection => "Environmental Protection",
            CofogDivision::HousingAndCommunityAmenities => "Housing and Community Amenities",
            CofogDivision::Health => "Health",
            CofogDivision::RecreationCultureAndReligion => "Recreation Culture and Religion",
            CofogDivision::Education => "Education",
            CofogDivision::SocialProtection => "Social Protection",
        }
    }
}

impl fmt::Display for CofogDivision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind}: {value:?}")]
pub struct ParseEnumError {
    pub kind: &'static str,
    pub value: String,
}

/// Lowercases and collapses punctuation so "Recreation, Culture and Religion"
/// and "recreation culture & religion" compare equal.
fn normalize_label(s: &str) -> String {
    s.replace('&', " and ")
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

impl FromStr for CofogDivision {
    type Err = ParseEnumError;

    /// Accepts the numeric code ("7", "07") or the division name in any
    /// punctuation/case variant.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        if let Ok(code) = trimmed.parse::<u8>() {
            return Self::from_code(code).ok_or_else(|| ParseEnumError {
                kind: "COFOG division",
                value: s.to_string(),
            });
        }
        let norm = normalize_label(trimmed);
        Self::ALL
            .iter()
            .copied()
            .find(|d| normalize_label(d.name()) == norm)
            .or(match norm.as_str() {
                "defense" => Some(CofogDivision::Defence),
                "recreation culture and religion" | "recreation" => Some(CofogDivision::RecreationCultureAndReligion),
                "housing" => Some(CofogDivision::HousingAndCommunityAmenities),
                _ => None,
            })
            .ok_or_else(|| ParseEnumError {
                kind: "COFOG division",
                value: s.to_string(),
            })
    }
}

impl Serialize for CofogDivision {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.code_str())
    }
}

impl<'de> Deserialize<'de> for CofogDivision {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Code(u8),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Code(c) => CofogDivision::from_code(c)
                .ok_or_else(|| serde::de::Error::custom(format!("COFOG code out of range: {c}"))),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpportunityType {
    Ari,
    Consultation,
    LearningAgenda,
    Fellowship,
    Internship,
    Event,
    Funding,
    AdvisoryCommittee,
}

impl OpportunityType {
    pub const ALL: [OpportunityType; 8] = [
        OpportunityType::Ari,
        OpportunityType::Consultation,
        OpportunityType::LearningAgenda,
        OpportunityType::Fellowship,
        OpportunityType::Internship,
        OpportunityType::Event,
        OpportunityType::Funding,
        OpportunityType::AdvisoryCommittee,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpportunityType::Ari => "ARI",
            OpportunityType::Consultation => "Consultation",
            OpportunityType::LearningAgenda => "LearningAgenda",
            OpportunityType::Fellowship => "Fellowship",
            OpportunityType::Internship => "Internship",
            OpportunityType::Event => "Event",
            OpportunityType::Funding => "Funding",
            OpportunityType::AdvisoryCommittee => "AdvisoryCommittee",
        }
    }

    /// Resolves a source string through the alias table.
    ///
    /// "Government research priorities" is region dependent: US records are
    /// learning agendas, everything else is an ARI.
    pub fn parse_for_country(s: &str, country: Option<&str>) -> Result<Self, ParseEnumError> {
        let norm = normalize_label(s);
        let ty = match norm.as_str() {
            "ari" | "aris" | "areas of research interest" | "area of research interest" => OpportunityType::Ari,
            "consultation"
            | "consultations"
            | "calls for evidence"
            | "call for evidence"
            | "calls for evidence and consultations" => OpportunityType::Consultation,
            "learningagenda" | "learning agenda" | "learning agendas" => OpportunityType::LearningAgenda,
            "government research priorities" | "government research priority" => {
                if country.map(|c| c.eq_ignore_ascii_case("US")).unwrap_or(false) {
                    OpportunityType::LearningAgenda
                } else {
                    OpportunityType::Ari
                }
            }
            "fellowship" | "fellowships" => OpportunityType::Fellowship,
            "internship" | "internships" => OpportunityType::Internship,
            "event" | "events" => OpportunityType::Event,
            "funding" | "funding call" | "funding calls" => OpportunityType::Funding,
            "advisorycommittee"
            | "advisory committee"
            | "advisory committees"
            | "expert advisory committee"
            | "expert advisory committees" => OpportunityType::AdvisoryCommittee,
            _ => {
                return Err(ParseEnumError {
                    kind: "opportunity type",
                    value: s.to_string(),
                })
            }
        };
        Ok(ty)
    }
}

impl fmt::Display for OpportunityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpportunityType {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_for_country(s, None)
    }
}

impl Serialize for OpportunityType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OpportunityType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Maps common country names onto ISO 3166-1 alpha-2 codes. Inputs that
/// already look like a code are upper-cased and returned as-is; validation
/// decides whether they are acceptable.
pub fn resolve_country(raw: &str) -> String {
    const ALIASES: &[(&str, &str)] = &[
        ("united kingdom", "GB"),
        ("uk", "GB"),
        ("great britain", "GB"),
        ("england", "GB"),
        ("scotland", "GB"),
        ("wales", "GB"),
        ("northern ireland", "GB"),
        ("australia", "AU"),
        ("united states", "US"),
        ("united states of america", "US"),
        ("usa", "US"),
        ("canada", "CA"),
        ("new zealand", "NZ"),
        ("ireland", "IE"),
        ("germany", "DE"),
        ("france", "FR"),
        ("netherlands", "NL"),
        ("european union", "EU"),
    ];
    let trimmed = raw.trim();
    let norm = normalize_label(trimmed);
    ALIASES
        .iter()
        .find(|(name, _)| *name == norm)
        .map(|(_, code)| code.to_string())
        .unwrap_or_else(|| {
            if trimmed.len() == 2 {
                trimmed.to_ascii_uppercase()
            } else {
                trimmed.to_string()
            }
        })
}

/// A publicly documented policy engagement opportunity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opportunity {
    pub id: String,
    pub title: String,
    pub description: String,
    pub organisation: String,
    pub country: String,
    pub opportunity_type: OpportunityType,
    pub cofog: CofogDivision,
    pub source_url: String,
    #[serde(default)]
    pub contact: Option<String>,
    #[serde(default)]
    pub deadline: Option<String>,
    #[serde(default)]
    pub published_at: Option<String>,
}

/// One broken invariant on one field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
    pub value: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} (got {:?})", self.field, self.rule, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{} violation(s): {}", .0.len(), .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct Violations(pub Vec<Violation>);

fn is_alpha2(s: &str) -> bool {
    s.len() == 2 && s.bytes().all(|b| b.is_ascii_uppercase())
}

/// Checks every per-record invariant and reports all failures. Uniqueness of
/// ids is a corpus-level property and is enforced by the loader.
pub fn validate_opportunity(record: Opportunity) -> Result<Opportunity, Violations> {
    let mut v = Vec::new();
    let mut push = |field: &str, rule: &str, value: &str| {
        v.push(Violation {
            field: field.to_string(),
            rule: rule.to_string(),
            value: value.to_string(),
        })
    };
    if record.id.trim().is_empty() {
        push("id", "must be non-empty", &record.id);
    }
    if !is_alpha2(&record.country) {
        push("country", "not alpha-2", &record.country);
    }
    if record.source_url.trim().is_empty() {
        push("source_url", "must be non-empty", &record.source_url);
    }
    if record.description.trim().is_empty() {
        push("description", "must be non-empty after trim", &record.description);
    }
    for (field, value) in [("deadline", &record.deadline), ("published_at", &record.published_at)] {
        if let Some(d) = value {
            if NaiveDate::parse_from_str(d, "%Y-%m-%d").is_err() {
                push(field, "not an ISO-8601 date (YYYY-MM-DD)", d);
            }
        }
    }
    if v.is_empty() {
        Ok(record)
    } else {
        Err(Violations(v))
    }
}

/// Match confidence tier. Ordered by increasing distance, so `Green` is the
/// smallest (most confident) value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Green,
    Yellow,
    Orange,
    Red,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Green, Tier::Yellow, Tier::Orange, Tier::Red];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Green => "Green",
            Tier::Yellow => "Yellow",
            Tier::Orange => "Orange",
            Tier::Red => "Red",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tier {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tier::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ParseEnumError {
                kind: "tier",
                value: s.to_string(),
            })
    }
}

/// Upper L2 bounds (inclusive) of each tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierThresholds {
    pub green: f64,
    pub yellow: f64,
    pub orange: f64,
    pub red: f64,
}

impl Default for TierThresholds {
    fn default() -> Self {
        Self {
            green: 0.288,
            yellow: 0.309,
            orange: 0.334,
            red: 0.39,
        }
    }
}

impl TierThresholds {
    pub fn as_array(&self) -> [f64; 4] {
        [self.green, self.yellow, self.orange, self.red]
    }

    pub fn bound(&self, tier: Tier) -> f64 {
        self.as_array()[tier.index()]
    }
}

impl fmt::Display for TierThresholds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.green, self.yellow, self.orange, self.red)
    }
}

impl FromStr for TierThresholds {
    type Err = ThresholdError;

    /// Parses "g,y,o,r" and validates the result.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(ThresholdError::Malformed(s.to_string()));
        }
        let mut vals = [0.0; 4];
        for (slot, p) in vals.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| ThresholdError::Malformed(s.to_string()))?;
        }
        validate_thresholds(TierThresholds {
            green: vals[0],
            yellow: vals[1],
            orange: vals[2],
            red: vals[3],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ThresholdError {
    #[error("thresholds must be positive: green = {0}")]
    NonPositive(f64),
    #[error("thresholds must be strictly increasing: {comparison} violated ({lhs} vs {rhs})")]
    NotIncreasing {
        comparison: &'static str,
        lhs: f64,
        rhs: f64,
    },
    #[error("malformed thresholds {0:?}, expected four comma-separated numbers")]
    Malformed(String),
}

pub fn validate_thresholds(t: TierThresholds) -> Result<TierThresholds, ThresholdError> {
    // NaN fails every comparison below, so it is rejected too.
    if !(t.green > 0.0) {
        return Err(ThresholdError::NonPositive(t.green));
    }
    let checks = [
        ("green < yellow", t.green, t.yellow),
        ("yellow < orange", t.yellow, t.orange),
        ("orange < red", t.orange, t.red),
    ];
    for (comparison, lhs, rhs) in checks {
        if !(lhs < rhs) {
            return Err(ThresholdError::NotIncreasing { comparison, lhs, rhs });
        }
    }
    Ok(t)
}
