//! Read-only REST endpoints over the active snapshot plus the publish hook.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use polimatch_core::analytics::{
    compare_distributions, distribution, scatter, AnalyticsError, Dimension, DistributionReport, OpportunityFilter,
    ScatterMode,
};
use polimatch_core::matching::{rank_researchers, Scope};
use polimatch_core::model::{resolve_country, CofogDivision, OpportunityType};
use serde::Serialize;
use serde_json::{json, Value};

use crate::snapshot::{PublishError, Snapshot};
use crate::store::{is_known_artifact, Artifact, SnapshotStore};

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;
const MAX_UPLOAD_BYTES: usize = 1 << 30;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SnapshotStore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub field: Option<String>,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            field: None,
            message: message.into(),
        }
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: Some(field.to_string()),
            ..Self::new(StatusCode::BAD_REQUEST, "invalid_parameter", message)
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id:?}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({ "code": self.code, "message": self.message });
        if let Some(f) = self.field {
            err["field"] = Value::String(f);
        }
        (self.status, Json(json!({ "error": err }))).into_response()
    }
}

impl From<PublishError> for ApiError {
    fn from(e: PublishError) -> Self {
        Self {
            field: Some(e.stage.to_string()),
            ..Self::new(StatusCode::UNPROCESSABLE_ENTITY, "publish_failed", e.to_string())
        }
    }
}

type ApiResult = Result<Response, ApiError>;
type Params = Query<HashMap<String, String>>;

fn active(state: &AppState) -> Result<Arc<Snapshot>, ApiError> {
    state.store.active().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no_snapshot",
            "no snapshot has been published",
        )
    })
}

fn reject_unknown(params: &HashMap<String, String>, allowed: &[&str]) -> Result<(), ApiError> {
    let mut unknown: Vec<&String> = params.keys().filter(|k| !allowed.contains(&k.as_str())).collect();
    unknown.sort();
    match unknown.first() {
        Some(k) => Err(ApiError::invalid(k, format!("unknown parameter {k:?}"))),
        None => Ok(()),
    }
}

fn param<'a>(params: &'a HashMap<String, String>, key: &str) -> Option<&'a str> {
    params.get(key).map(String::as_str).filter(|v| !v.trim().is_empty())
}

fn parse_country(field: &str, raw: &str) -> Result<String, ApiError> {
    let c = resolve_country(raw);
    if c.len() == 2 && c.bytes().all(|b| b.is_ascii_uppercase()) {
        Ok(c)
    } else {
        Err(ApiError::invalid(field, format!("unknown country {raw:?}")))
    }
}

fn parse_cofog(field: &str, raw: &str) -> Result<CofogDivision, ApiError> {
    raw.parse()
        .map_err(|e: polimatch_core::model::ParseEnumError| ApiError::invalid(field, e.to_string()))
}

fn parse_type(field: &str, raw: &str) -> Result<OpportunityType, ApiError> {
    raw.parse()
        .map_err(|e: polimatch_core::model::ParseEnumError| ApiError::invalid(field, e.to_string()))
}

fn filter_from(params: &HashMap<String, String>) -> Result<OpportunityFilter, ApiError> {
    Ok(OpportunityFilter {
        country: param(params, "country")
            .map(|v| parse_country("country", v))
            .transpose()?,
        opportunity_type: param(params, "type").map(|v| parse_type("type", v)).transpose()?,
        cofog: param(params, "cofog").map(|v| parse_cofog("cofog", v)).transpose()?,
    })
}

fn scope_from(params: &HashMap<String, String>) -> Result<Scope, ApiError> {
    Ok(param(params, "cofog")
        .map(|v| parse_cofog("cofog", v))
        .transpose()?
        .map_or(Scope::All, Scope::Division))
}

fn ok<T: Serialize>(body: T) -> ApiResult {
    Ok(Json(body).into_response())
}

async fn health(State(state): State<AppState>) -> ApiResult {
    ok(json!({ "status": "ok", "snapshot_id": state.store.active().map(|s| s.id()) }))
}

async fn snapshot_meta(State(state): State<AppState>) -> ApiResult {
    ok(&active(&state)?.meta)
}

async fn list_opportunities(State(state): State<AppState>, Query(params): Params) -> ApiResult {
    reject_unknown(&params, &["country", "cofog", "type", "q", "cursor", "limit"])?;
    let snap = active(&state)?;
    let filter = filter_from(&params)?;
    let limit = match param(&params, "limit") {
        Some(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| (1..=MAX_PAGE_SIZE).contains(n))
            .ok_or_else(|| ApiError::invalid("limit", format!("limit must be between 1 and {MAX_PAGE_SIZE}")))?,
        None => DEFAULT_PAGE_SIZE,
    };
    let needle = param(&params, "q").map(str::to_lowercase);
    let cursor = param(&params, "cursor");
    let matching: Vec<_> = snap
        .opportunities()
        .iter()
        .filter(|o| filter.matches(o))
        .filter(|o| {
            needle
                .as_deref()
                .is_none_or(|q| o.title.to_lowercase().contains(q) || o.description.to_lowercase().contains(q))
        })
        .collect();
    let start = cursor.map_or(0, |c| matching.partition_point(|o| o.id.as_str() <= c));
    let page: Vec<_> = matching[start..].iter().take(limit).collect();
    let next_cursor = (start + page.len() < matching.len())
        .then(|| page.last().map(|o| o.id.clone()))
        .flatten();
    ok(json!({
        "snapshot_id": snap.id(),
        "total": matching.len(),
        "items": page,
        "next_cursor": next_cursor,
    }))
}

async fn get_opportunity(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let snap = active(&state)?;
    let o = snap
        .opportunity(&id)
        .ok_or_else(|| ApiError::not_found("opportunity", &id))?;
    ok(json!({ "snapshot_id": snap.id(), "opportunity": o, "rewrite": snap.rewrite(&id) }))
}

async fn opportunity_matches(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let snap = active(&state)?;
    snap.opportunity(&id)
        .ok_or_else(|| ApiError::not_found("opportunity", &id))?;
    ok(json!({
        "snapshot_id": snap.id(),
        "opportunity_id": id,
        "thresholds": snap.meta.thresholds,
        "items": snap.matches(&id),
    }))
}

async fn opportunity_researchers(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let snap = active(&state)?;
    snap.opportunity(&id)
        .ok_or_else(|| ApiError::not_found("opportunity", &id))?;
    let ranked = rank_researchers(snap.matches(&id), snap.authorship())
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    ok(json!({ "snapshot_id": snap.id(), "opportunity_id": id, "items": ranked }))
}

async fn list_institutions(State(state): State<AppState>) -> ApiResult {
    let snap = active(&state)?;
    let items: Vec<Value> = snap
        .stats()
        .iter()
        .map(|s| {
            let mut v = json!(s);
            v["display_name"] = json!(snap.institution_name(&s.institution_id));
            v
        })
        .collect();
    ok(json!({ "snapshot_id": snap.id(), "items": items }))
}

async fn institution_coverage(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(params): Params,
) -> ApiResult {
    reject_unknown(&params, &["cofog"])?;
    let snap = active(&state)?;
    let scope = scope_from(&params)?;
    if !snap.stats().iter().any(|s| s.institution_id == id) {
        return Err(ApiError::not_found("institution", &id));
    }
    let row = snap.coverage_row(&id, scope).ok_or_else(|| ApiError {
        field: Some("cofog".into()),
        ..ApiError::new(
            StatusCode::BAD_REQUEST,
            "empty_scope",
            format!("no opportunities in scope {scope}"),
        )
    })?;
    let mut body = json!(row);
    body["snapshot_id"] = json!(snap.id());
    ok(body)
}

fn analytics_error(e: AnalyticsError) -> ApiError {
    match e {
        AnalyticsError::Empty => ApiError::new(StatusCode::NOT_FOUND, "no_records", "no records match the selection"),
        AnalyticsError::DimensionMismatch { .. } => ApiError::invalid("dimension", e.to_string()),
        AnalyticsError::UnknownDimension(_) => ApiError::invalid("by", e.to_string()),
        AnalyticsError::AbsoluteScope(_) => ApiError::invalid("cofog", e.to_string()),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
    }
}

fn parse_dimension(field: &str, raw: Option<&str>) -> Result<Dimension, ApiError> {
    raw.unwrap_or("cofog")
        .parse()
        .map_err(|e: AnalyticsError| ApiError::invalid(field, e.to_string()))
}

async fn analytics_distribution(State(state): State<AppState>, Query(params): Params) -> ApiResult {
    reject_unknown(&params, &["by", "country", "type", "cofog"])?;
    let snap = active(&state)?;
    let by = parse_dimension("by", param(&params, "by"))?;
    let filter = filter_from(&params)?;
    let report = distribution(snap.opportunities(), by, &filter).map_err(analytics_error)?;
    ok(json!({ "snapshot_id": snap.id(), "filter": filter, "report": report }))
}

/// Resolves a comparison operand: `all`, an imported dataset name, or a
/// comma-separated filter such as `country:GB,type:Consultation`.
fn resolve_dataset(snap: &Snapshot, field: &str, operand: &str, by: Dimension) -> Result<DistributionReport, ApiError> {
    if let Some(d) = snap.dataset(operand) {
        return Ok(d.clone());
    }
    let mut filter = OpportunityFilter::default();
    if operand != "all" {
        for part in operand.split(',') {
            let (key, value) = part
                .split_once(':')
                .ok_or_else(|| ApiError::invalid(field, format!("unknown dataset or filter {operand:?}")))?;
            match key.trim() {
                "country" => filter.country = Some(parse_country(field, value)?),
                "type" => filter.opportunity_type = Some(parse_type(field, value)?),
                "cofog" => filter.cofog = Some(parse_cofog(field, value)?),
                other => return Err(ApiError::invalid(field, format!("unknown filter key {other:?}"))),
            }
        }
    }
    distribution(snap.opportunities(), by, &filter).map_err(|e| match e {
        AnalyticsError::Empty => ApiError::invalid(field, format!("{operand:?} selects no records")),
        other => analytics_error(other),
    })
}

async fn analytics_compare(State(state): State<AppState>, Query(params): Params) -> ApiResult {
    reject_unknown(&params, &["dimension", "a", "b"])?;
    let snap = active(&state)?;
    let by = parse_dimension("dimension", param(&params, "dimension"))?;
    let a = param(&params, "a").ok_or_else(|| ApiError::invalid("a", "missing dataset a"))?;
    let b = param(&params, "b").ok_or_else(|| ApiError::invalid("b", "missing dataset b"))?;
    let da = resolve_dataset(&snap, "a", a, by)?;
    let db = resolve_dataset(&snap, "b", b, by)?;
    let rows = compare_distributions(&da, &db).map_err(analytics_error)?;
    ok(json!({
        "snapshot_id": snap.id(),
        "dimension": by,
        "label_a": a,
        "label_b": b,
        "rows": rows,
    }))
}

async fn analytics_scatter(State(state): State<AppState>, Query(params): Params) -> ApiResult {
    reject_unknown(&params, &["mode", "cofog"])?;
    let snap = active(&state)?;
    let mode: ScatterMode = param(&params, "mode")
        .ok_or_else(|| ApiError::invalid("mode", "missing mode (absolute or coverage)"))?
        .parse()
        .map_err(|e: String| ApiError::invalid("mode", e))?;
    let scope = scope_from(&params)?;
    if mode == ScatterMode::Coverage && snap.coverage().iter().all(|r| r.scope != scope) {
        return Err(ApiError {
            field: Some("cofog".into()),
            ..ApiError::new(
                StatusCode::BAD_REQUEST,
                "empty_scope",
                format!("no opportunities in scope {scope}"),
            )
        });
    }
    let points = scatter(snap.stats(), snap.coverage(), mode, scope).map_err(analytics_error)?;
    ok(json!({ "snapshot_id": snap.id(), "mode": mode, "scope": scope, "points": points }))
}

/// Each multipart field is named after the artifact it carries, e.g.
/// `opportunities.ndjson` or `datasets/policy_documents.csv`.
async fn publish(State(state): State<AppState>, mut form: Multipart) -> ApiResult {
    let bad_upload = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "bad_upload", m);
    let mut artifacts = Vec::new();
    while let Some(field) = form.next_field().await.map_err(|e| bad_upload(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        if !is_known_artifact(&name) {
            return Err(ApiError::invalid(&name, format!("unknown artifact {name:?}")));
        }
        let bytes = field.bytes().await.map_err(|e| bad_upload(e.to_string()))?;
        artifacts.push(Artifact {
            name,
            bytes: bytes.to_vec(),
        });
    }
    let store = state.store.clone();
    let meta = tokio::task::spawn_blocking(move || store.publish(artifacts))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok((StatusCode::CREATED, Json(meta)).into_response())
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/snapshot", get(snapshot_meta))
        .route("/opportunities", get(list_opportunities))
        .route("/opportunities/{id}", get(get_opportunity))
        .route("/opportunities/{id}/matches", get(opportunity_matches))
        .route("/opportunities/{id}/researchers", get(opportunity_researchers))
        .route("/institutions", get(list_institutions))
        .route("/institutions/{id}/coverage", get(institution_coverage))
        .route("/analytics/distribution", get(analytics_distribution))
        .route("/analytics/compare", get(analytics_compare))
        .route("/analytics/scatter", get(analytics_scatter))
        .route(
            "/admin/publish",
            post(publish).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .fallback(fallback)
        .with_state(state)
}
