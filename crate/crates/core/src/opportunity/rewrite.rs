//! Research-oriented rewriting of opportunity descriptions.
//!
//! The production rewriter is a remote generative model; only its output
//! schema matters here. [`TemplateRewriter`] is the deterministic stand-in
//! used by tests and reproducible runs.

use std::collections::HashSet;
use std::io::{self, BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{send_with_retry, RetryPolicy, Transport};
use crate::model::{CofogDivision, Opportunity};
use crate::text::top_keywords;

pub const MAX_TEMPLATE_KEYWORDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenOpportunity {
    pub opportunity_id: String,
    pub rewritten_title: String,
    pub background: String,
    pub research_questions: Vec<String>,
    pub keywords: Vec<String>,
    pub cofog: CofogDivision,
}

impl RewrittenOpportunity {
    pub fn validate(&self) -> Result<(), String> {
        if self.research_questions.is_empty() {
            return Err("research_questions must contain at least one entry".into());
        }
        let mut seen = HashSet::new();
        for k in &self.keywords {
            if *k != k.to_lowercase() {
                return Err(format!("keyword {k:?} is not lowercase"));
            }
            if !seen.insert(k) {
                return Err(format!("duplicate keyword {k:?}"));
            }
        }
        Ok(())
    }
}

/// Lowercases and removes duplicates, keeping first occurrences in order.
pub fn normalize_keywords<I: IntoIterator<Item = String>>(raw: I) -> Vec<String> {
    let mut seen = HashSet::new();
    raw.into_iter()
        .map(|k| k.trim().to_lowercase())
        .filter(|k| !k.is_empty() && seen.insert(k.clone()))
        .collect()
}

#[derive(Debug, Clone, Error)]
pub enum RewriteError {
    #[error("rewriter failed for {opportunity_id}: {message}")]
    Provider {
        opportunity_id: String,
        retryable: bool,
        message: String,
    },
    #[error("rewriter output for {opportunity_id} violates the schema: {message}")]
    Schema { opportunity_id: String, message: String },
}

pub trait Rewriter: Send + Sync {
    fn rewrite(&self, opp: &Opportunity) -> Result<RewrittenOpportunity, RewriteError>;
}

/// Splits on sentence terminators (`.`, `!`, `?`) followed by whitespace or
/// end of text.
pub fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = current.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            current.clear();
        }
    }
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateRewriter;

impl Rewriter for TemplateRewriter {
    fn rewrite(&self, opp: &Opportunity) -> Result<RewrittenOpportunity, RewriteError> {
        let mut questions: Vec<String> = sentences(&opp.description)
            .into_iter()
            .filter(|s| s.ends_with('?'))
            .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
            .collect();
        if questions.is_empty() {
            questions.push(format!("What evidence addresses: {}?", opp.title.trim()));
        }
        let keywords = top_keywords(&format!("{}\n{}", opp.title, opp.description), MAX_TEMPLATE_KEYWORDS);
        Ok(RewrittenOpportunity {
            opportunity_id: opp.id.clone(),
            rewritten_title: opp.title.clone(),
            background: opp.description.clone(),
            research_questions: questions,
            keywords,
            cofog: opp.cofog,
        })
    }
}

/// HTTP rewriter: `POST {id, title, description}` returning the rewritten
/// schema (without `opportunity_id`, which is filled from the request).
pub struct RemoteRewriter {
    transport: Arc<dyn Transport>,
    url: String,
    retry: RetryPolicy,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RemoteRewrite {
    rewritten_title: String,
    background: String,
    research_questions: Vec<String>,
    keywords: Vec<String>,
    cofog: CofogDivision,
}

impl RemoteRewriter {
    pub fn new(transport: Arc<dyn Transport>, url: impl Into<String>, retry: RetryPolicy) -> Self {
        Self {
            transport,
            url: url.into(),
            retry,
        }
    }
}

impl Rewriter for RemoteRewriter {
    fn rewrite(&self, opp: &Opportunity) -> Result<RewrittenOpportunity, RewriteError> {
        let body = serde_json::json!({
            "id": opp.id,
            "title": opp.title,
            "description": opp.description,
        });
        let resp = send_with_retry(&self.retry, || self.transport.post_json(&self.url, &body)).map_err(|e| {
            RewriteError::Provider {
                opportunity_id: opp.id.clone(),
                retryable: e.is_retryable(),
                message: e.to_string(),
            }
        })?;
        let schema_err = |message: String| RewriteError::Schema {
            opportunity_id: opp.id.clone(),
            message,
        };
        let parsed: RemoteRewrite = serde_json::from_slice(&resp.body).map_err(|e| schema_err(e.to_string()))?;
        let out = RewrittenOpportunity {
            opportunity_id: opp.id.clone(),
            rewritten_title: parsed.rewritten_title,
            background: parsed.background,
            research_questions: parsed.research_questions,
            keywords: normalize_keywords(parsed.keywords),
            cofog: parsed.cofog,
        };
        out.validate().map_err(schema_err)?;
        Ok(out)
    }
}

/// Rewrites every record, possibly in parallel, returning results in input
/// order. Stops at the first failure.
pub fn rewrite_all(opps: &[Opportunity], provider: &dyn Rewriter) -> Result<Vec<RewrittenOpportunity>, RewriteError> {
    opps.par_iter().map(|o| provider.rewrite(o)).collect()
}

#[derive(Debug, Error)]
pub enum RewriteIoError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate rewrite for {id:?}")]
    Duplicate { id: String, line: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads rewrites one JSON object per line, validating each.
pub fn read_rewrites_ndjson<R: BufRead>(reader: R) -> Result<Vec<RewrittenOpportunity>, RewriteIoError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| RewriteIoError::Parse { line: i + 1, message };
        let r: RewrittenOpportunity = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        r.validate().map_err(parse)?;
        if !seen.insert(r.opportunity_id.clone()) {
            return Err(RewriteIoError::Duplicate {
                id: r.opportunity_id,
                line: i + 1,
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_rewrites_ndjson<W: Write>(rewrites: &[RewrittenOpportunity], mut out: W) -> io::Result<()> {
    for r in rewrites {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::{HttpResponse, TransportError};
    use crate::model::OpportunityType;
    use proptest::prelude::*;

    fn opp(title: &str, description: &str) -> Opportunity {
        Opportunity {
            id: "op-1".into(),
            title: title.into(),
            description: description.into(),
            organisation: "Org".into(),
            country: "GB".into(),
            opportunity_type: OpportunityType::Ari,
            cofog: CofogDivision::EnvironmentalProtection,
            source_url: "https://x".into(),
            contact: None,
            deadline: None,
            published_at: None,
        }
    }

    #[test]
    fn question_sentences_become_research_questions() {
        let r = TemplateRewriter
            .rewrite(&opp(
                "Levies",
                "We are consulting on packaging. How should levies be set? Respond by May.",
            ))
            .unwrap();
        assert_eq!(r.research_questions, ["How should levies be set?"]);
        assert_eq!(r.rewritten_title, "Levies");
        assert_eq!(
            r.background,
            "We are consulting on packaging. How should levies be set? Respond by May."
        );
        assert_eq!(r.cofog, CofogDivision::EnvironmentalProtection);
        r.validate().unwrap();
    }

    #[test]
    fn fallback_question_uses_title() {
        let r = TemplateRewriter
            .rewrite(&opp(
                "Flood resilience",
                "The agency seeks evidence on coastal defences.",
            ))
            .unwrap();
        assert_eq!(r.research_questions, ["What evidence addresses: Flood resilience?"]);
    }

    #[test]
    fn keywords_are_capped_lowercase_and_unique() {
        let desc = "Alpha beta gamma delta epsilon zeta eta theta iota kappa lambda mu ALPHA alpha.";
        let r = TemplateRewriter.rewrite(&opp("Greek", desc)).unwrap();
        assert_eq!(r.keywords.len(), 10);
        assert_eq!(r.keywords[0], "alpha");
        r.validate().unwrap();
    }

    #[test]
    fn sentence_splitter_handles_decimals_and_urls() {
        assert_eq!(
            sentences("Rates rose 2.5 percent. Why? See gov.uk for more"),
            ["Rates rose 2.5 percent.", "Why?", "See gov.uk for more"]
        );
    }

    #[test]
    fn template_output_is_byte_identical_across_runs() {
        let o = opp(
            "Net zero",
            "What is the role of heat pumps? How do we fund it? Evidence is sought.",
        );
        let a = serde_json::to_vec(&TemplateRewriter.rewrite(&o).unwrap()).unwrap();
        let b = serde_json::to_vec(&TemplateRewriter.rewrite(&o).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    struct Reply(u16, &'static str);

    impl Transport for Reply {
        fn get(&self, _url: &str) -> Result<HttpResponse, TransportError> {
            unreachable!()
        }
        fn post_json(&self, _url: &str, body: &serde_json::Value) -> Result<HttpResponse, TransportError> {
            assert_eq!(body["id"], "op-1");
            assert!(body.get("title").is_some() && body.get("description").is_some());
            Ok(HttpResponse {
                status: self.0,
                body: self.1.as_bytes().to_vec(),
            })
        }
    }

    #[test]
    fn remote_rewrite_parses_schema() {
        let t = Arc::new(Reply(
            200,
            r#"{"rewritten_title":"T","background":"B","research_questions":["Q?"],"keywords":["Flood","flood","risk"],"cofog":"05"}"#,
        ));
        let r = RemoteRewriter::new(t, "http://llm", RetryPolicy::immediate(0))
            .rewrite(&opp("x", "y"))
            .unwrap();
        assert_eq!(r.opportunity_id, "op-1");
        assert_eq!(r.keywords, ["flood", "risk"]);
    }

    #[test]
    fn remote_schema_violations_are_errors() {
        for body in [
            r#"{"rewritten_title":"T","background":"B","research_questions":[],"keywords":[],"cofog":"05"}"#,
            r#"{"rewritten_title":"T","background":"B","keywords":[],"cofog":"05"}"#,
            r#"{"rewritten_title":"T","background":"B","research_questions":["Q?"],"keywords":[],"cofog":"99"}"#,
        ] {
            let t = Arc::new(Reply(200, body));
            let err = RemoteRewriter::new(t, "http://llm", RetryPolicy::immediate(0))
                .rewrite(&opp("x", "y"))
                .unwrap_err();
            assert!(
                matches!(err, RewriteError::Schema { ref opportunity_id, .. } if opportunity_id == "op-1"),
                "{body}"
            );
        }
    }

    #[test]
    fn remote_outage_is_retryable_and_names_the_record() {
        let t = Arc::new(Reply(503, "down"));
        let err = RemoteRewriter::new(t, "http://llm", RetryPolicy::immediate(1))
            .rewrite(&opp("x", "y"))
            .unwrap_err();
        match err {
            RewriteError::Provider {
                opportunity_id,
                retryable,
                ..
            } => {
                assert_eq!(opportunity_id, "op-1");
                assert!(retryable);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rewrites_round_trip_through_ndjson() {
        let mut second = opp("Two", "Soil health matters.");
        second.id = "op-2".into();
        let rs = vec![
            TemplateRewriter
                .rewrite(&opp("One", "Why does it rain? Clouds form."))
                .unwrap(),
            TemplateRewriter.rewrite(&second).unwrap(),
        ];
        let mut buf = Vec::new();
        write_rewrites_ndjson(&rs, &mut buf).unwrap();
        assert_eq!(read_rewrites_ndjson(&buf[..]).unwrap(), rs);
        let mut twice = buf.clone();
        twice.extend_from_slice(&buf);
        assert!(matches!(
            read_rewrites_ndjson(&twice[..]),
            Err(RewriteIoError::Duplicate { line: 3, .. })
        ));
        let bad = br#"{"opportunity_id":"x","rewritten_title":"t","background":"b","research_questions":[],"keywords":[],"cofog":"07"}"#;
        assert!(matches!(
            read_rewrites_ndjson(&bad[..]),
            Err(RewriteIoError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn rewrite_all_preserves_order() {
        let opps: Vec<Opportunity> = (0..50)
            .map(|i| {
                let mut o = opp(&format!("T{i}"), "Why now?");
                o.id = format!("op-{i}");
                o
            })
            .collect();
        let out = rewrite_all(&opps, &TemplateRewriter).unwrap();
        for (o, r) in opps.iter().zip(&out) {
            assert_eq!(o.id, r.opportunity_id);
        }
    }

    proptest! {
        #[test]
        fn template_rewrite_is_pure(title in "[A-Za-z ]{1,20}", desc in "[A-Za-z?.! ]{1,120}") {
            let o = opp(&title, &desc);
            let a = TemplateRewriter.rewrite(&o).unwrap();
            let b = TemplateRewriter.rewrite(&o.clone()).unwrap();
            prop_assert!(a.validate().is_ok());
            prop_assert_eq!(a, b);
        }
    }
}
