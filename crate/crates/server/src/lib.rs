//! JSON-over-HTTP front end for an [`ExperimentService`].
//!
//! | method | path | reply |
//! |---|---|---|
//! | POST | `/api/sessions` | 201 `{token, condition_code}` |
//! | GET | `/api/sessions/{token}/step` | step descriptor |
//! | POST | `/api/sessions/{token}/responses` | outcome; optional `Idempotency-Key` header |
//! | GET | `/api/content` | all content pages and the questionnaire |
//! | GET | `/api/content/{id}` | one page, or `questionnaire` |
//! | GET | `/api/schema` | feature schema |
//! | GET | `/api/golden-scores` | preview score per range width, CSV |
//! | GET | `/api/health` | `{status: "ok"}` |
//!
//! Errors are `{"error": message, "fields": [...]}` with 400 for invalid
//! input, 404 for unknown tokens or content, 409 for out-of-order or
//! conflicting submissions and 503 when storage fails.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use tokio::net::TcpListener;
use trustshift_core::content::Content;
use trustshift_core::dataset::FeatureSchema;
use trustshift_core::protocol::{CreateSession, FieldError, ProtocolError, Submission};
use trustshift_core::scoring::golden_table_csv;
use trustshift_core::service::{ExperimentService, ServiceError};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
const MAX_KEY_LEN: usize = 128;

#[derive(Clone)]
pub struct AppState {
    service: Arc<ExperimentService>,
    content: Arc<Content>,
}

impl AppState {
    pub fn new(service: Arc<ExperimentService>, content: Content) -> Self {
        Self {
            service,
            content: Arc::new(content),
        }
    }

    pub fn service(&self) -> &Arc<ExperimentService> {
        &self.service
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::NotFound => StatusCode::NOT_FOUND,
            ServiceError::IdempotencyConflict(_) => StatusCode::CONFLICT,
            ServiceError::Store(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Protocol(p) => match p {
                ProtocolError::Invalid(_) => StatusCode::BAD_REQUEST,
                ProtocolError::OutOfOrder { .. }
                | ProtocolError::Closed(_)
                | ProtocolError::Incomplete
                | ProtocolError::NotRevealed(_) => StatusCode::CONFLICT,
                ProtocolError::Replay(_) | ProtocolError::Setup(_) | ProtocolError::Explain(_) => {
                    StatusCode::INTERNAL_SERVER_ERROR
                }
            },
        };
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        let fields = match &e {
            ServiceError::Protocol(ProtocolError::Invalid(f)) => f.clone(),
            _ => Vec::new(),
        };
        Self {
            status,
            message: e.to_string(),
            fields,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.message, "fields": self.fields });
        (self.status, Json(body)).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

/// Run blocking service work (locks, file appends, fsync) off the reactor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => {
            tracing::error!(error = %e, "worker task failed");
            Err(ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "internal error",
            ))
        }
    }
}

fn ok_json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    (status, Json(value)).into_response()
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let request: CreateSession = parse_body(&body)?;
    let created = blocking(move || state.service.create_session(&request)).await?;
    Ok(ok_json(StatusCode::CREATED, &created))
}

async fn step(
    State(state): State<AppState>,
    Path(token): Path<String>,
) -> Result<Response, ApiError> {
    let step = blocking(move || state.service.step(&token)).await?;
    Ok(ok_json(StatusCode::OK, &step))
}

fn idempotency_key(headers: &HeaderMap) -> Result<Option<String>, ApiError> {
    let Some(value) = headers.get(IDEMPOTENCY_HEADER) else {
        return Ok(None);
    };
    let key = value
        .to_str()
        .ok()
        .filter(|k| !k.is_empty() && k.len() <= MAX_KEY_LEN)
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "invalid Idempotency-Key header"))?;
    Ok(Some(key.to_string()))
}

async fn respond(
    State(state): State<AppState>,
    Path(token): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let key = idempotency_key(&headers)?;
    let submission: Submission = parse_body(&body)?;
    let outcome =
        blocking(move || state.service.submit(&token, &submission, key.as_deref())).await?;
    Ok(ok_json(StatusCode::OK, &outcome))
}

async fn all_content(State(state): State<AppState>) -> Response {
    ok_json(StatusCode::OK, state.content.as_ref())
}

async fn content(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let c = &state.content;
    if id == "questionnaire" {
        return Ok(ok_json(
            StatusCode::OK,
            &json!({ "id": id, "version": c.version, "questionnaire": c.questionnaire }),
        ));
    }
    let text = c
        .page(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no content {id}")))?;
    Ok(ok_json(
        StatusCode::OK,
        &json!({ "id": id, "version": c.version, "text": text }),
    ))
}

async fn schema() -> Response {
    (
        [(header::CONTENT_TYPE, "application/json")],
        FeatureSchema::shipped_json(),
    )
        .into_response()
}

async fn golden_scores(State(state): State<AppState>) -> Response {
    let csv = golden_table_csv(&state.service.experiment().score);
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response()
}

async fn health() -> Response {
    ok_json(StatusCode::OK, &json!({ "status": "ok" }))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{token}/step", get(step))
        .route("/api/sessions/{token}/responses", post(respond))
        .route("/api/content", get(all_content))
        .route("/api/content/{id}", get(content))
        .route("/api/schema", get(schema))
        .route("/api/golden-scores", get(golden_scores))
        .route("/api/health", get(health))
        .fallback(not_found)
        .with_state(state)
}

/// Mark idle sessions abandoned every `every`.
pub fn spawn_sweeper(
    service: Arc<ExperimentService>,
    every: Duration,
) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        tick.tick().await;
        loop {
            tick.tick().await;
            let s = service.clone();
            match tokio::task::spawn_blocking(move || s.sweep()).await {
                Ok(Ok(0)) => {}
                Ok(Ok(n)) => tracing::info!(abandoned = n, "swept idle sessions"),
                Ok(Err(e)) => tracing::error!(error = %e, "sweep failed"),
                Err(e) => tracing::error!(error = %e, "sweep task failed"),
            }
        }
    })
}

/// Serve until ctrl-c.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    let sweeper = spawn_sweeper(state.service.clone(), Duration::from_secs(60));
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    sweeper.abort();
    result
}
