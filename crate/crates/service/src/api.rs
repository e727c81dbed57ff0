//! HTTP routes. Every response body carries `"version": 1`; failures carry a
//! single `error` object.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use facecot_core::dataset::DatasetStats;
use facecot_core::pipeline::{HardCase, RejectReason};
use facecot_core::reward::{score_batch, ScoreOutput, ScorePair};
use facecot_core::schema::{extract_conclusion, validate_annotation, ParseError, PartialAnnotation, Strictness, Verdict};
use facecot_core::taxonomy::{Category, Subtype};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::RwLock;

use crate::store::{CorrectionError, QueuedCase, Store};

pub const API_VERSION: u32 = 1;
pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;
pub const DEFAULT_MAX_BATCH: usize = 10_000;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_batch: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_batch: DEFAULT_MAX_BATCH,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<RwLock<Store>>,
    pub config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(store: Store, config: ServiceConfig) -> Self {
        Self {
            store: Arc::new(RwLock::new(store)),
            config: Arc::new(config),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    NotFound,
    ValidationFailed,
    ConclusionMismatch,
    Conflict,
    BadRequest,
    /// The event log could not be written; the store is unchanged.
    Internal,
}

impl ErrorCode {
    fn status(self) -> StatusCode {
        match self {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::ValidationFailed | ErrorCode::ConclusionMismatch => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            details: None,
        }
    }

    fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    version: u32,
    error: &'a ApiError,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            version: API_VERSION,
            error: &self,
        };
        (self.code.status(), Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<CorrectionError> for ApiError {
    fn from(e: CorrectionError) -> Self {
        match e {
            CorrectionError::NotFound(id) => ApiError::new(ErrorCode::NotFound, format!("no hard case {id}")),
            CorrectionError::Conflict { expected, actual } => ApiError::new(ErrorCode::Conflict, "stale revision")
                .with_details(json!({ "expected_revision": expected, "revision": actual })),
            CorrectionError::Rejected(r) => {
                let code = match r.reason {
                    RejectReason::FormatInvalid => ErrorCode::ValidationFailed,
                    RejectReason::ConclusionMismatch => ErrorCode::ConclusionMismatch,
                    RejectReason::AlreadyResolved => ErrorCode::Conflict,
                };
                let message = match r.reason {
                    RejectReason::FormatInvalid => "correction does not follow the annotation template",
                    RejectReason::ConclusionMismatch => "correction conclusion differs from the ground truth",
                    RejectReason::AlreadyResolved => "case is already resolved",
                };
                ApiError::new(code, message).with_details(json!({ "errors": r.errors }))
            }
            CorrectionError::Store(e) => {
                tracing::error!(error = %e, "event log write failed");
                ApiError::new(ErrorCode::Internal, format!("store unavailable: {e}"))
            }
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/hardcases", get(list_hardcases))
        .route("/hardcases/{id}", get(get_hardcase).put(put_correction))
        .route("/score", post(post_score))
        .route("/stats", get(get_stats))
        .route("/validate", post(post_validate))
        .fallback(|| async { ApiError::new(ErrorCode::NotFound, "no such endpoint") })
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub version: u32,
    pub status: String,
    pub service_version: String,
    pub revision: u64,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        version: API_VERSION,
        status: "ok".into(),
        service_version: env!("CARGO_PKG_VERSION").into(),
        revision: state.store.read().await.revision(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Pending,
    Resolved,
}

#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    pub subtype: Option<String>,
    pub status: Option<CaseStatus>,
    pub cursor: Option<String>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub sample_id: String,
    pub seq: u64,
    pub subtype: Subtype,
    pub category: Category,
    pub label: Verdict,
    pub attempt_count: usize,
    pub last_verdict: Option<Verdict>,
    pub status: CaseStatus,
}

impl From<&QueuedCase> for CaseSummary {
    fn from(q: &QueuedCase) -> Self {
        let c = &q.case;
        Self {
            sample_id: c.sample_id.clone(),
            seq: q.seq,
            subtype: c.subtype,
            category: c.subtype.category(),
            label: c.label,
            attempt_count: c.attempts.len(),
            last_verdict: c.attempts.last().and_then(|a| a.verdict),
            status: if c.resolved { CaseStatus::Resolved } else { CaseStatus::Pending },
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CasePage {
    pub version: u32,
    pub revision: u64,
    pub items: Vec<CaseSummary>,
    pub next_cursor: Option<String>,
}

/// Cursors are `<seq>:<sample_id>` of the last item already returned.
fn parse_cursor(raw: &str) -> Result<(u64, String), ApiError> {
    let malformed = || ApiError::bad_request(format!("malformed cursor {raw:?}"));
    let (seq, id) = raw.split_once(':').ok_or_else(malformed)?;
    let seq = seq.parse().map_err(|_| malformed())?;
    if id.is_empty() {
        return Err(malformed());
    }
    Ok((seq, id.to_string()))
}

async fn list_hardcases(
    State(state): State<AppState>,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> ApiResult<CasePage> {
    let Query(q) = query?;
    let subtype = q
        .subtype
        .as_deref()
        .map(str::parse::<Subtype>)
        .transpose()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let after = q.cursor.as_deref().map(parse_cursor).transpose()?;
    let limit = q.limit.unwrap_or(DEFAULT_PAGE_SIZE);
    if limit == 0 || limit > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!("limit must be in 1..={MAX_PAGE_SIZE}")));
    }

    let store = state.store.read().await;
    let mut matching = store
        .cases()
        .iter()
        .filter(|qc| subtype.is_none_or(|s| qc.case.subtype == s))
        .filter(|qc| q.status.is_none_or(|st| (st == CaseStatus::Resolved) == qc.case.resolved))
        .filter(|qc| {
            after
                .as_ref()
                .is_none_or(|(seq, id)| (qc.seq, qc.case.sample_id.as_str()) > (*seq, id.as_str()))
        });
    let items: Vec<CaseSummary> = matching.by_ref().take(limit).map(CaseSummary::from).collect();
    let next_cursor = match (matching.next(), items.last()) {
        (Some(_), Some(last)) => Some(format!("{}:{}", last.seq, last.sample_id)),
        _ => None,
    };
    Ok(Json(CasePage {
        version: API_VERSION,
        revision: store.revision(),
        items,
        next_cursor,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaseResponse {
    pub version: u32,
    pub revision: u64,
    pub seq: u64,
    pub case: HardCase,
}

async fn get_hardcase(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<CaseResponse> {
    let store = state.store.read().await;
    let q = store
        .get(&id)
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("no hard case {id}")))?;
    Ok(Json(CaseResponse {
        version: API_VERSION,
        revision: store.revision(),
        seq: q.seq,
        case: q.case.clone(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorrectionRequest {
    pub expected_revision: u64,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub sections: Option<PartialAnnotation>,
}

async fn put_correction(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<CorrectionRequest>, JsonRejection>,
) -> ApiResult<CaseResponse> {
    let Json(req) = body?;
    let text = match (req.text, req.sections) {
        (Some(t), None) => t,
        (None, Some(s)) => s.to_text(),
        _ => return Err(ApiError::bad_request("provide exactly one of `text` or `sections`")),
    };
    let mut store = state.store.write().await;
    let q = store.correct(&id, &text, req.expected_revision)?.clone();
    Ok(Json(CaseResponse {
        version: API_VERSION,
        revision: store.revision(),
        seq: q.seq,
        case: q.case,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub items: Vec<ScorePair>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub version: u32,
    #[serde(flatten)]
    pub output: ScoreOutput,
}

async fn post_score(
    State(state): State<AppState>,
    body: Result<Json<ScoreRequest>, JsonRejection>,
) -> ApiResult<ScoreResponse> {
    let Json(req) = body?;
    if req.items.is_empty() {
        return Err(ApiError::bad_request("empty batch"));
    }
    if req.items.len() > state.config.max_batch {
        return Err(ApiError::bad_request(format!(
            "batch of {} exceeds the limit of {}",
            req.items.len(),
            state.config.max_batch
        ))
        .with_details(json!({ "max_batch": state.config.max_batch })));
    }
    let output = tokio::task::spawn_blocking(move || score_batch(&req.items))
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, format!("scoring failed: {e}")))?
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(ScoreResponse {
        version: API_VERSION,
        output,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueueSummary {
    pub pending: usize,
    pub resolved: usize,
    pub revision: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatsResponse {
    pub version: u32,
    pub revision: u64,
    pub stats: DatasetStats,
    pub table: String,
    pub queue: QueueSummary,
}

async fn get_stats(State(state): State<AppState>) -> Json<StatsResponse> {
    let store = state.store.read().await;
    let resolved = store.cases().iter().filter(|q| q.case.resolved).count();
    Json(StatsResponse {
        version: API_VERSION,
        revision: store.revision(),
        stats: store.stats().clone(),
        table: store.stats().render_table(),
        queue: QueueSummary {
            pending: store.cases().len() - resolved,
            resolved,
            revision: store.revision(),
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ValidateRequest {
    pub text: String,
    #[serde(default)]
    pub strictness: Strictness,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ValidateResponse {
    pub version: u32,
    pub ok: bool,
    pub errors: Vec<ParseError>,
    pub conclusion: Option<Verdict>,
}

async fn post_validate(body: Result<Json<ValidateRequest>, JsonRejection>) -> ApiResult<ValidateResponse> {
    let Json(req) = body?;
    let report = validate_annotation(&req.text, req.strictness);
    Ok(Json(ValidateResponse {
        version: API_VERSION,
        ok: report.ok,
        errors: report.errors,
        conclusion: extract_conclusion(&req.text),
    }))
}
