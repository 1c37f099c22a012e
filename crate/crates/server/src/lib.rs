//! HTTP service over the generation pipeline.
//!
//! | route                    | success | failures                 |
//! |--------------------------|---------|--------------------------|
//! | `POST /v1/scenarios`     | 200     | 400, 500, 502            |
//! | `POST /v1/scripts`       | 200     | 400, 404, 422, 500, 502  |
//! | `POST /v1/feedback`      | 204     | 400, 404                 |
//! | `GET /v1/reports/summary`| 200     | 500                      |
//! | `GET /healthz`           | 200     |                          |
//!
//! Every failed request appends an `error` event to the ledger.

use std::sync::Arc;

use atgen_core::eval::{compute_metrics, feedback_rate, feedback_records, render_report, EvalError, ReportFormat};
use atgen_core::gateway::{GatewayError, Usage};
use atgen_core::gherkin::LintFinding;
use atgen_core::ledger::{ErrorRecord, FeedbackRecord, Ledger, LedgerEvent};
use atgen_core::page::PageError;
use atgen_core::pipeline::{Pipeline, PipelineError};
use atgen_core::story::{StoryBundle, StoryError};
use atgen_core::{MappingReport, StructureReport, UserStory};
use axum::body::Bytes;
use axum::extract::{Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Issue key given to stories passed inline rather than through a tracker.
pub const INLINE_KEY: &str = "INLINE-0";

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub ledger: Arc<Ledger>,
    pub bearer_token: Option<String>,
}

impl AppState {
    pub fn new(pipeline: Pipeline, ledger: Arc<Ledger>) -> Self {
        Self {
            pipeline: Arc::new(pipeline.with_ledger(ledger.clone())),
            ledger,
            bearer_token: None,
        }
    }

    pub fn with_bearer_token(mut self, token: Option<String>) -> Self {
        self.bearer_token = token.filter(|t| !t.is_empty());
        self
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/v1/scenarios", post(scenarios))
        .route("/v1/scripts", post(scripts))
        .route("/v1/feedback", post(feedback))
        .route("/v1/reports/summary", get(summary))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(api)
        .with_state(state)
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub field: Option<&'static str>,
    pub stage: Option<&'static str>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
            stage: None,
        }
    }

    fn field(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field: Some(field),
            ..Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.message, "code": self.code});
        if let Some(field) = self.field {
            body["field"] = json!(field);
        }
        if let Some(stage) = self.stage {
            body["stage"] = json!(stage);
        }
        (self.status, Json(body)).into_response()
    }
}

fn story_status(e: &StoryError) -> (StatusCode, &'static str) {
    match e {
        StoryError::InvalidKey(_) | StoryError::MissingIssue | StoryError::NoPages | StoryError::BadUrl(_) => {
            (StatusCode::BAD_REQUEST, "invalid_request")
        }
        StoryError::NotFound(_) => (StatusCode::NOT_FOUND, "unknown_issue"),
        StoryError::MissingGherkin(_) | StoryError::BadGherkin { .. } | StoryError::MissingField { .. } => {
            (StatusCode::UNPROCESSABLE_ENTITY, "unusable_issue")
        }
        StoryError::Auth(_) | StoryError::Tracker(_) => (StatusCode::BAD_GATEWAY, "tracker_error"),
        StoryError::Local { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "story_source_error"),
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, code) = match &e {
            PipelineError::Prompt(_) | PipelineError::NoPages | PipelineError::EmptyContext => {
                (StatusCode::BAD_REQUEST, "invalid_request")
            }
            PipelineError::Page {
                source: PageError::InvalidUrl { .. },
                ..
            } => (StatusCode::BAD_REQUEST, "invalid_request"),
            PipelineError::Page { .. } => (StatusCode::BAD_GATEWAY, "page_fetch_failed"),
            PipelineError::Gateway {
                source: GatewayError::CacheMiss { .. },
                ..
            } => (StatusCode::INTERNAL_SERVER_ERROR, "cache_miss"),
            PipelineError::Gateway {
                source: GatewayError::Config(_) | GatewayError::Cassette { .. },
                ..
            } => (StatusCode::INTERNAL_SERVER_ERROR, "gateway_config"),
            PipelineError::Gateway { .. } => (StatusCode::BAD_GATEWAY, "gateway_error"),
            PipelineError::UnparsableOutput { .. } | PipelineError::NoCodeBlock { .. } => {
                (StatusCode::BAD_GATEWAY, "unusable_model_output")
            }
            PipelineError::MissingGherkin(_) | PipelineError::BadGherkin(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "unusable_issue")
            }
            PipelineError::Story(s) => story_status(s),
            PipelineError::NoStorySource | PipelineError::Ledger(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        Self {
            stage: e.stage(),
            ..Self::new(status, code, e.to_string())
        }
    }
}

fn record_error(ledger: &Ledger, operation: &str, err: &ApiError) {
    let event = LedgerEvent::Error(ErrorRecord {
        operation: operation.to_string(),
        status: err.status.as_u16(),
        message: err.message.clone(),
        timestamp: Utc::now(),
    });
    if let Err(e) = ledger.append(&event) {
        eprintln!("could not record error event: {e}");
    }
}

fn finish<T: IntoResponse>(state: &AppState, operation: &str, result: Result<T, ApiError>) -> Response {
    match result {
        Ok(ok) => ok.into_response(),
        Err(err) => {
            record_error(&state.ledger, operation, &err);
            err.into_response()
        }
    }
}

async fn require_token(State(state): State<AppState>, headers: HeaderMap, request: Request, next: Next) -> Response {
    let Some(expected) = &state.bearer_token else {
        return next.run(request).await;
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(expected.as_str()) {
        return next.run(request).await;
    }
    let err = ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token");
    record_error(&state.ledger, request.uri().path(), &err);
    err.into_response()
}

// ---------------------------------------------------------------------------
// Request parsing

fn parse_object(body: &[u8]) -> Result<serde_json::Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", "body must be a JSON object")),
        Err(e) => Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", format!("malformed JSON: {e}"))),
    }
}

fn required_text(map: &serde_json::Map<String, Value>, field: &'static str) -> Result<String, ApiError> {
    match map.get(field) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(ApiError::field(field, format!("`{field}` must not be empty"))),
        Some(_) => Err(ApiError::field(field, format!("`{field}` must be a string"))),
        None => Err(ApiError::field(field, format!("`{field}` is required"))),
    }
}

fn optional_text(map: &serde_json::Map<String, Value>, field: &'static str) -> Result<Option<String>, ApiError> {
    match map.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(ApiError::field(field, format!("`{field}` must be a string"))),
    }
}

// ---------------------------------------------------------------------------
// Handlers

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    Json(json!({"status": "ok", "backend": state.pipeline.gateway().backend()}))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScenariosResponse {
    pub generation_id: String,
    pub feature_text: String,
    pub lint: Vec<LintFinding>,
    pub usage: Usage,
    pub cost: String,
}

async fn scenarios(State(state): State<AppState>, body: Bytes) -> Response {
    let result = async {
        let map = parse_object(&body)?;
        let title = required_text(&map, "title")?;
        let description = required_text(&map, "description")?;
        let generated = state
            .pipeline
            .generate_scenarios(&UserStory::new(title, description))
            .await?;
        Ok(Json(ScenariosResponse {
            generation_id: generated.generation_id,
            feature_text: generated.feature_text,
            lint: generated.lint.findings,
            usage: generated.usage,
            cost: generated.cost.to_string(),
        }))
    }
    .await;
    finish(&state, "scenarios", result)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScriptResponse {
    pub generation_id: String,
    pub issue_key: String,
    pub script_text: String,
    pub structure: StructureReport,
    pub mapping: MappingReport,
    pub usage: Usage,
    pub cost: String,
}

async fn resolve_bundle(state: &AppState, map: &serde_json::Map<String, Value>) -> Result<StoryBundle, ApiError> {
    let inline = map.contains_key("story") || map.contains_key("feature_text");
    match (map.get("issue_key"), inline) {
        (Some(_), true) => Err(ApiError::field("issue_key", "give either `issue_key` or `story` + `feature_text`, not both")),
        (None, false) => Err(ApiError::field("issue_key", "`issue_key` or `story` + `feature_text` is required")),
        (Some(_), false) => {
            let key = required_text(map, "issue_key")?;
            Ok(state.pipeline.resolve_issue(&key).await?)
        }
        (None, true) => {
            let story = match map.get("story") {
                Some(Value::Object(s)) => s,
                _ => return Err(ApiError::field("story", "`story` must be an object with `title` and `description`")),
            };
            let title = required_text(story, "title").map_err(|e| ApiError { field: Some("story.title"), ..e })?;
            let description =
                required_text(story, "description").map_err(|e| ApiError { field: Some("story.description"), ..e })?;
            let feature_text = required_text(map, "feature_text")?;
            StoryBundle::new(INLINE_KEY, UserStory::new(title, description), Some(feature_text)).map_err(|e| {
                let (status, code) = story_status(&e);
                ApiError::new(status, code, e.to_string())
            })
        }
    }
}

async fn scripts(State(state): State<AppState>, body: Bytes) -> Response {
    let result = async {
        let map = parse_object(&body)?;
        let page_urls: Vec<String> = match map.get("page_urls") {
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<_>>()
                .ok_or_else(|| ApiError::field("page_urls", "`page_urls` must be an array of strings"))?,
            Some(_) => return Err(ApiError::field("page_urls", "`page_urls` must be an array of strings")),
            None => return Err(ApiError::field("page_urls", "`page_urls` is required")),
        };
        if page_urls.is_empty() {
            return Err(ApiError::field("page_urls", "at least one page URL is required"));
        }
        let extra_context = optional_text(&map, "extra_context")?;
        let bundle = resolve_bundle(&state, &map).await?;
        let result = state
            .pipeline
            .generate_script(&bundle, &page_urls, extra_context.as_deref())
            .await?;
        Ok(Json(ScriptResponse {
            generation_id: result.generation_id,
            issue_key: bundle.issue_key,
            script_text: result.code.code,
            structure: result.structure,
            mapping: result.mapping,
            usage: result.usage,
            cost: result.cost.to_string(),
        }))
    }
    .await;
    finish(&state, "scripts", result)
}

async fn feedback(State(state): State<AppState>, body: Bytes) -> Response {
    let result = async {
        let map = parse_object(&body)?;
        let generation_id = required_text(&map, "generation_id")?;
        let helpful = match map.get("helpful") {
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(ApiError::field("helpful", "`helpful` must be a boolean")),
            None => return Err(ApiError::field("helpful", "`helpful` is required")),
        };
        let comment = optional_text(&map, "comment")?;
        let internal = |e: atgen_core::ledger::LedgerError| {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
        };
        let known = state
            .ledger
            .events()
            .map_err(internal)?
            .iter()
            .any(|e| e.generation_id() == Some(generation_id.as_str()));
        if !known {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown_generation",
                format!("no generation `{generation_id}`"),
            ));
        }
        state
            .ledger
            .append(&LedgerEvent::Feedback(FeedbackRecord {
                generation_id,
                helpful,
                comment,
                timestamp: Utc::now(),
            }))
            .map_err(internal)?;
        Ok(StatusCode::NO_CONTENT)
    }
    .await;
    finish(&state, "feedback", result)
}

#[derive(Debug, Deserialize)]
struct SummaryQuery {
    format: Option<String>,
}

async fn summary(State(state): State<AppState>, Query(q): Query<SummaryQuery>) -> Response {
    let result = (|| {
        let events = state
            .ledger
            .events()
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
        let metrics = match compute_metrics(&events) {
            Ok(m) => Some(m),
            Err(EvalError::EmptyLedger) => None,
            Err(e) => return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "bad_ledger", e.to_string())),
        };
        let records = feedback_records(&events);
        let format = match q.format.as_deref() {
            None => ReportFormat::Json,
            Some(f) => f
                .parse()
                .map_err(|e: String| ApiError::field("format", e))?,
        };
        Ok(match (format, metrics) {
            (ReportFormat::Json, metrics) => Json(json!({
                "metrics": metrics,
                "feedback": {
                    "records": records.len(),
                    "helpful": records.iter().filter(|r| r.helpful).count(),
                    "rate": feedback_rate(&records).ok(),
                },
            }))
            .into_response(),
            (other, Some(m)) => render_report(&m, other).into_response(),
            (_, None) => String::new().into_response(),
        })
    })();
    finish(&state, "reports/summary", result)
}
