//! HTTP surface. Every handler that touches the agent runs on the blocking
//! pool; each session sits behind its own mutex so at most one advance is
//! in flight per session.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use fmsel_core::catalog::ModelRecord;
use fmsel_core::dialogue::ClarificationQuestion;
use fmsel_core::orchestrator::{AgentOutput, OrchestratorError, OutputStatus, SessionState, SimulatedUser};
use fmsel_core::query::{ClarificationAnswer, QueryError, StructuredQuery};
use fmsel_core::ranking::{hard_filter, icl_rank, Elimination, RankingError, Survivor};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::runtime::Runtime;

pub const DEFAULT_K: usize = 3;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, r.body_text())
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let status = match &e {
            OrchestratorError::SessionComplete
            | OrchestratorError::UnexpectedAnswers(_)
            | OrchestratorError::AnswersRequired => StatusCode::CONFLICT,
            OrchestratorError::InvalidK | OrchestratorError::Query(QueryError::EmptyInput) => StatusCode::BAD_REQUEST,
            OrchestratorError::Query(QueryError::Invalid(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_GATEWAY,
        };
        ApiError::new(status, e.to_string())
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}"))
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub struct ApiSession {
    pub state: SessionState,
    pub output: AgentOutput,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub status: OutputStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub questions: Option<Vec<ClarificationQuestion>>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub output: AgentOutput,
    pub state: SessionState,
}

impl ApiSession {
    fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            session_id: self.state.session_id.clone(),
            status: self.output.status,
            questions: self.output.clarification.as_ref().map(|c| c.questions.clone()),
            created_at: self.created_at,
            updated_at: self.updated_at,
            output: self.output.clone(),
            state: self.state.clone(),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub runtime: Runtime,
    sessions: Arc<Mutex<HashMap<String, Arc<Mutex<ApiSession>>>>>,
}

impl AppState {
    pub fn new(runtime: Runtime) -> Self {
        AppState {
            runtime,
            sessions: Arc::default(),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<ApiSession>>, ApiError> {
        self.sessions
            .lock()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`")))
    }
}

pub fn router(state: AppState) -> Router {
    let origins: Vec<HeaderValue> = state
        .runtime
        .config
        .server
        .cors_origins
        .iter()
        .filter_map(|o| HeaderValue::from_str(o).ok())
        .collect();
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/answers", post(answer_session))
        .route("/select", post(select))
        .route("/models", get(list_models))
        .route("/models/{id}", get(get_model))
        .route("/rank/preview", post(rank_preview))
        .layer(cors)
        .with_state(state)
}

async fn health(State(app): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "catalog_size": app.runtime.catalog.len(),
        "index_dimension": app.runtime.index.dimension(),
    }))
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub query: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

async fn create_session(
    State(app): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<SessionSnapshot> {
    let Json(req) = body?;
    let runtime = app.runtime.clone();
    let session_id = uuid::Uuid::new_v4().to_string();
    let id = session_id.clone();
    let (state, output) = tokio::task::spawn_blocking(move || {
        let agent = runtime.agent();
        let state = agent.new_session(id, &req.query, req.k)?;
        agent.run_to_pause(state)
    })
    .await
    .map_err(join_error)??;
    let now = Utc::now();
    let session = ApiSession {
        state,
        output,
        created_at: now,
        updated_at: now,
    };
    let snapshot = session.snapshot();
    app.sessions.lock().insert(session_id, Arc::new(Mutex::new(session)));
    Ok(Json(snapshot))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionSnapshot> {
    let session = app.session(&id)?;
    let snapshot = session.lock().snapshot();
    Ok(Json(snapshot))
}

#[derive(Debug, Deserialize)]
pub struct AnswerPayload {
    pub answers: Vec<ClarificationAnswer>,
}

async fn answer_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<AnswerPayload>, JsonRejection>,
) -> ApiResult<SessionSnapshot> {
    let session = app.session(&id)?;
    let Json(payload) = body?;
    let runtime = app.runtime.clone();
    let snapshot = tokio::task::spawn_blocking(move || -> Result<SessionSnapshot, ApiError> {
        let mut guard = session.lock();
        let (state, output) = runtime.agent().answer(guard.state.clone(), &payload.answers)?;
        guard.state = state;
        guard.output = output;
        guard.updated_at = Utc::now();
        Ok(guard.snapshot())
    })
    .await
    .map_err(join_error)??;
    Ok(Json(snapshot))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoAnswer {
    #[default]
    None,
    Scripted,
}

#[derive(Debug, Deserialize)]
pub struct SelectRequest {
    pub query: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub auto_answer: AutoAnswer,
}

/// Runs one selection to completion, or to its first clarification when
/// nobody is there to answer.
pub fn one_shot_select(runtime: &Runtime, query: &str, k: usize, auto_answer: AutoAnswer) -> Result<AgentOutput, OrchestratorError> {
    let agent = runtime.agent();
    let state = agent.new_session(uuid::Uuid::new_v4().to_string(), query, k)?;
    let (_, output) = match auto_answer {
        AutoAnswer::None => agent.run_to_pause(state)?,
        AutoAnswer::Scripted => agent.run_with(
            state,
            &SimulatedUser {
                generator: runtime.user.clone(),
            },
        )?,
    };
    Ok(output)
}

async fn select(State(app): State<AppState>, body: Result<Json<SelectRequest>, JsonRejection>) -> ApiResult<AgentOutput> {
    let Json(req) = body?;
    let runtime = app.runtime.clone();
    let output = tokio::task::spawn_blocking(move || one_shot_select(&runtime, &req.query, req.k, req.auto_answer))
        .await
        .map_err(join_error)??;
    Ok(Json(output))
}

async fn list_models(State(app): State<AppState>) -> Json<Value> {
    Json(json!({
        "count": app.runtime.catalog.len(),
        "models": app.runtime.catalog.records(),
    }))
}

async fn get_model(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<ModelRecord> {
    app.runtime
        .catalog
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown model `{id}`")))
}

#[derive(Debug, Deserialize)]
pub struct PreviewRequest {
    pub query: Value,
    /// Empty means the whole catalog.
    #[serde(default)]
    pub model_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PreviewEntry {
    pub model_id: String,
    pub model_name: String,
    pub rank: u32,
    pub selection_confidence: f64,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PreviewResponse {
    pub query: StructuredQuery,
    pub surviving: Vec<String>,
    pub eliminated: Vec<Elimination>,
    pub ranking: Vec<PreviewEntry>,
    pub ranking_degraded: bool,
}

/// Filter and rank a fixed candidate set under a structured query. Touches
/// no session and no memory.
pub fn preview(runtime: &Runtime, query: StructuredQuery, model_ids: &[String]) -> Result<PreviewResponse, ApiError> {
    let catalog = &runtime.catalog;
    let records: Vec<&ModelRecord> = if model_ids.is_empty() {
        catalog.iter().collect()
    } else {
        let unknown: Vec<&str> = model_ids
            .iter()
            .filter(|id| catalog.get(id).is_none())
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                format!("unknown model ids: {}", unknown.join(", ")),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        model_ids
            .iter()
            .filter(|id| seen.insert(id.as_str()))
            .filter_map(|id| catalog.get(id))
            .collect()
    };
    let report = hard_filter(&records, &query);
    let similarity: HashMap<String, f64> = match query.render_retrieval_text() {
        Some(text) => runtime
            .index
            .search_text(runtime.embedder.as_ref(), &text, runtime.index.len().max(1), -1.0)
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?
            .into_iter()
            .map(|h| (h.key, h.similarity))
            .collect(),
        None => HashMap::new(),
    };
    let survivors: Vec<Survivor> = report
        .surviving
        .iter()
        .filter_map(|id| catalog.get(id))
        .map(|record| Survivor {
            record,
            similarity: similarity.get(&record.model_id).copied().unwrap_or(0.0),
        })
        .collect();
    let (ranking, ranking_degraded) =
        match icl_rank(runtime.generator.as_ref(), &query, &survivors, None, &runtime.config.agent.ranking) {
            Ok(outcome) => (outcome.ranked, outcome.degraded),
            Err(RankingError::NoSurvivors) => (Vec::new(), false),
            Err(e) => return Err(ApiError::new(StatusCode::BAD_GATEWAY, e.to_string())),
        };
    Ok(PreviewResponse {
        surviving: report.surviving.clone(),
        eliminated: report.eliminated.clone(),
        ranking: ranking
            .into_iter()
            .map(|r| PreviewEntry {
                model_name: catalog.get(&r.model_id).map_or_else(|| r.model_id.clone(), |m| m.model_name.clone()),
                model_id: r.model_id,
                rank: r.rank,
                selection_confidence: r.selection_confidence,
                reasons: r.reasons,
            })
            .collect(),
        ranking_degraded,
        query,
    })
}

async fn rank_preview(
    State(app): State<AppState>,
    body: Result<Json<PreviewRequest>, JsonRejection>,
) -> ApiResult<PreviewResponse> {
    let Json(req) = body?;
    let query = StructuredQuery::from_json(&req.query.to_string())
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let runtime = app.runtime.clone();
    let response = tokio::task::spawn_blocking(move || preview(&runtime, query, &req.model_ids))
        .await
        .map_err(join_error)??;
    Ok(Json(response))
}
