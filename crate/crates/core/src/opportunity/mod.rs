//! Opportunity ingestion, rewriting, COFOG assignment and text composition.

mod cofog;
mod load;
mod rewrite;

pub use cofog::{classify_cofog, default_seeds, CentroidClassifier, ClassifyError, CofogClassifier};
pub use load::{
    load_opportunities, write_opportunities_ndjson, InputFormat, LoadError, LoadReport, RowError, RowErrorKind,
};
pub use rewrite::{
    normalize_keywords, read_rewrites_ndjson, rewrite_all, sentences, write_rewrites_ndjson, RemoteRewriter,
    RewriteError, RewriteIoError, Rewriter, RewrittenOpportunity, TemplateRewriter, MAX_TEMPLATE_KEYWORDS,
};

pub const OPPORTUNITY_PREFIX: &str = "[OPPORTUNITY] ";

/// Embedder input for an opportunity:
///
/// ```text
/// [OPPORTUNITY] <title>
/// <background>
/// <question 1>
/// ...
/// Keywords: <k1>, <k2>, ...
/// ```
pub fn compose_opportunity_text(r: &RewrittenOpportunity) -> String {
    let mut out = String::with_capacity(64 + r.background.len());
    out.push_str(OPPORTUNITY_PREFIX);
    out.push_str(&r.rewritten_title);
    out.push('\n');
    out.push_str(&r.background);
    out.push('\n');
    out.push_str(&r.research_questions.join("\n"));
    out.push_str("\nKeywords: ");
    out.push_str(&r.keywords.join(", "));
    out
}
