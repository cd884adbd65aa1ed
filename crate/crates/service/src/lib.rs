//! HTTP front end for the labeling [`Store`].
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | POST | `/procedures` | `{patient_ref}` | `201 {id, created_at}` |
//! | GET | `/procedures?state=live\|finalized` | | summaries in creation order |
//! | GET | `/procedures/{id}` | | summary plus events |
//! | POST | `/procedures/{id}/events` | `{kind, station?, t?}` | `{t_assigned, event}` |
//! | POST | `/procedures/{id}/finalize` | optional `{t}` | the procedure record |
//! | GET | `/procedures/{id}/export?format=csv\|json` | | the export document |
//!
//! Errors are `{code, message}`: malformed bodies 400, validation 422,
//! unknown ids 404, state conflicts 409, storage 500, bad token 401.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use eusml_core::labeling::{
    EventRequest, ExportFormat, LabelEvent, LabelingError, ProcedureRecord, ProcedureSummary, SessionState, Store,
};
use serde::{Deserialize, Serialize};

/// Header carrying the shared token when one is configured.
pub const TOKEN_HEADER: &str = "x-eusml-token";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct Error {
    status: StatusCode,
    body: ApiError,
}

impl Error {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Error { status, body: ApiError { code: code.to_string(), message: message.into() } }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<LabelingError> for Error {
    fn from(e: LabelingError) -> Self {
        let status = match e {
            LabelingError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            LabelingError::NotFound(_) => StatusCode::NOT_FOUND,
            LabelingError::Conflict { .. } => StatusCode::CONFLICT,
            LabelingError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for Error {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    store: Arc<RwLock<Store>>,
    token: Option<Arc<str>>,
}

impl AppState {
    fn read(&self) -> std::sync::RwLockReadGuard<'_, Store> {
        self.store.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Store> {
        self.store.write().unwrap_or_else(|p| p.into_inner())
    }
}

/// Parses a JSON body, reporting syntax and shape errors as 400 and an
/// empty body as `None`.
fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<Option<T>, Error> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(None);
    }
    serde_json::from_slice(body).map(Some).map_err(|e| Error::bad_request(format!("invalid JSON body: {e}")))
}

fn require_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Error> {
    parse_body(body)?.ok_or_else(|| Error::bad_request("request body required"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub patient_ref: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub created_at: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventAck {
    pub t_assigned: f64,
    pub event: LabelEvent,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FinalizeRequest {
    #[serde(default)]
    pub t: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub summary: ProcedureSummary,
    pub events: Vec<LabelEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<ProcedureRecord>,
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    state: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    format: Option<String>,
}

async fn create(State(app): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Created>), Error> {
    let req: CreateRequest = require_body(&body)?;
    let s = app.write().create(&req.patient_ref)?;
    Ok((StatusCode::CREATED, Json(Created { id: s.id, created_at: s.created_at })))
}

async fn list(State(app): State<AppState>, Query(q): Query<ListQuery>) -> Result<Json<Vec<ProcedureSummary>>, Error> {
    let state = q.state.as_deref().map(str::parse::<SessionState>).transpose()?;
    Ok(Json(app.read().list(state)))
}

async fn show(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, Error> {
    let store = app.read();
    let s = store.get(&id)?;
    Ok(Json(SessionView { summary: s.summary(), events: s.events.clone(), record: s.record.clone() }))
}

async fn event(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<EventAck>, Error> {
    let req: EventRequest = require_body(&body)?;
    let event = app.write().record_event(&id, &req)?;
    Ok(Json(EventAck { t_assigned: event.t, event }))
}

async fn finalize(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<ProcedureRecord>, Error> {
    let req: FinalizeRequest = parse_body(&body)?.unwrap_or_default();
    Ok(Json(app.write().finalize(&id, req.t)?))
}

async fn export(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, Error> {
    let format: ExportFormat = q.format.as_deref().unwrap_or("csv").parse()?;
    let doc = app.read().export(&id, format)?;
    let mime = match format {
        ExportFormat::Csv => "text/csv; charset=utf-8",
        ExportFormat::Json => "application/json",
    };
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static(mime))], doc).into_response())
}

async fn check_token(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &app.token {
        let given = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(expected) {
            return Error::new(StatusCode::UNAUTHORIZED, "unauthorized", format!("missing or wrong {TOKEN_HEADER}"))
                .into_response();
        }
    }
    next.run(req).await
}

async fn fallback() -> Error {
    Error::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

/// The API over `store`. With `token` set, every request must carry it in
/// [`TOKEN_HEADER`].
pub fn router(store: Store, token: Option<String>) -> Router {
    let app = AppState { store: Arc::new(RwLock::new(store)), token: token.map(Arc::from) };
    Router::new()
        .route("/procedures", post(create).get(list))
        .route("/procedures/{id}", get(show))
        .route("/procedures/{id}/events", post(event))
        .route("/procedures/{id}/finalize", post(finalize))
        .route("/procedures/{id}/export", get(export))
        .fallback(fallback)
        .layer(middleware::from_fn_with_state(app.clone(), check_token))
        .with_state(app)
}

/// Opens the store under `data_dir`, binds `addr` and calls `on_bound` with
/// the actual address (useful with port 0) before serving until Ctrl-C.
pub async fn serve(
    data_dir: &Path,
    addr: SocketAddr,
    token: Option<String>,
    on_bound: impl FnOnce(SocketAddr),
) -> std::io::Result<()> {
    let store = Store::open(data_dir).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(store, token))
        .with_graceful_shutdown(async {
            tokio::signal::ctrl_c().await.ok();
        })
        .await
}
