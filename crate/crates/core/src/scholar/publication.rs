use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum trimmed abstract length (in characters) for a work to be embedded.
pub const MIN_ABSTRACT_CHARS: usize = 20;

pub const SCHOLAR_PREFIX: &str = "[SCHOLAR] ";

const TYPE_TABLE: &str = include_str!("../../data/openalex_types.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DocType {
    JournalArticle,
    BookChapter,
    Book,
    Report,
    Editorial,
    Letter,
    Other,
}

impl DocType {
    /// The six types eligible for matching.
    pub const ALLOWED: [DocType; 6] = [
        DocType::JournalArticle,
        DocType::BookChapter,
        DocType::Book,
        DocType::Report,
        DocType::Editorial,
        DocType::Letter,
    ];

    pub fn is_allowed(self) -> bool {
        self != DocType::Other
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DocType::JournalArticle => "journal-article",
            DocType::BookChapter => "book-chapter",
            DocType::Book => "book",
            DocType::Report => "report",
            DocType::Editorial => "editorial",
            DocType::Letter => "letter",
            DocType::Other => "other",
        }
    }

    fn parse_internal(s: &str) -> Option<Self> {
        Some(match s {
            "journal-article" => DocType::JournalArticle,
            "book-chapter" => DocType::BookChapter,
            "book" => DocType::Book,
            "report" => DocType::Report,
            "editorial" => DocType::Editorial,
            "letter" => DocType::Letter,
            "other" => DocType::Other,
            _ => return None,
        })
    }

    /// Maps an OpenAlex `type` string through the shipped table. Unlisted
    /// types map to `Other`.
    pub fn from_openalex(raw: &str) -> Self {
        static TABLE: OnceLock<HashMap<&'static str, DocType>> = OnceLock::new();
        let table = TABLE.get_or_init(|| {
            TYPE_TABLE
                .lines()
                .skip(1)
                .filter_map(|l| l.split_once(','))
                .map(|(k, v)| {
                    (
                        k.trim(),
                        DocType::parse_internal(v.trim()).expect("valid doc type in table"),
                    )
                })
                .collect()
        });
        table.get(raw.trim()).copied().unwrap_or(DocType::Other)
    }
}

impl fmt::Display for DocType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Publication {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: Option<String>,
    pub year: i32,
    pub doc_type: DocType,
    #[serde(default)]
    pub author_ids: Vec<String>,
    #[serde(default)]
    pub institution_ids: Vec<String>,
    #[serde(default)]
    pub is_paratext: bool,
    #[serde(default)]
    pub is_retracted: bool,
}

impl Publication {
    /// Drops abstracts that are too short to be meaningful.
    pub fn normalize_abstract(mut self) -> Self {
        if !usable_abstract(&self) {
            self.abstract_text = None;
        }
        self
    }
}

/// True iff the abstract is present and at least 20 characters once trimmed.
pub fn usable_abstract(p: &Publication) -> bool {
    p.abstract_text
        .as_deref()
        .map(|a| a.trim().chars().count() >= MIN_ABSTRACT_CHARS)
        .unwrap_or(false)
}

/// Keeps eligible document types and drops paratext and retracted works,
/// preserving order.
pub fn filter_publications(pubs: Vec<Publication>) -> Vec<Publication> {
    pubs.into_iter()
        .filter(|p| p.doc_type.is_allowed() && !p.is_paratext && !p.is_retracted)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("publication {id} has no usable abstract")]
pub struct NoUsableAbstract {
    pub id: String,
}

/// `[SCHOLAR] <title>\n<abstract>`.
pub fn compose_publication_text(p: &Publication) -> Result<String, NoUsableAbstract> {
    if !usable_abstract(p) {
        return Err(NoUsableAbstract { id: p.id.clone() });
    }
    let abs = p.abstract_text.as_deref().unwrap_or_default();
    Ok(format!("{SCHOLAR_PREFIX}{}\n{}", p.title, abs))
}

#[derive(Debug, Error)]
pub enum PublicationIoError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate publication id {id:?} on line {line}")]
    Duplicate { id: String, line: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn read_publications_ndjson<R: BufRead>(reader: R) -> Result<Vec<Publication>, PublicationIoError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Publication = serde_json::from_str(&line).map_err(|e| PublicationIoError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if p.id.is_empty() {
            return Err(PublicationIoError::Parse {
                line: i + 1,
                message: "empty publication id".into(),
            });
        }
        if !seen.insert(p.id.clone()) {
            return Err(PublicationIoError::Duplicate { id: p.id, line: i + 1 });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_publications_ndjson<W: Write>(pubs: &[Publication], mut out: W) -> io::Result<()> {
    for p in pubs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
