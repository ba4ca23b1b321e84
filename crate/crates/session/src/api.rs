//! HTTP routes over a shared session store.
//!
//! Each session sits behind an async mutex so that at most one query or
//! answer touches it at a time; a second writer gets `409` rather than
//! queueing. Reads are served from a snapshot refreshed after every
//! mutation, so they never observe a half-applied update.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query as UrlQuery, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex as AsyncMutex;
use tower_http::services::ServeDir;

use riskirl::active::QueryAnswer;

use crate::error::{ApiError, ErrorBody};
use crate::session::{Heatmap, PersistedSession, QueryView, Session, SessionView};
use crate::spec::{FieldError, TaskSpec};

/// JSON Schema of the `POST /sessions` body.
pub const TASK_SPEC_SCHEMA: &str = include_str!("../schema/task_spec.schema.json");

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Directory served for paths no route claims.
    pub static_dir: Option<PathBuf>,
    /// Where sessions are saved after every change and restored on start.
    pub persist_dir: Option<PathBuf>,
}

struct Entry {
    session: Arc<AsyncMutex<Session>>,
    view: RwLock<Arc<SessionView>>,
}

impl Entry {
    fn snapshot(&self) -> Arc<SessionView> {
        self.view.read().expect("view lock poisoned").clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

/// Progress of an answer submitted with `?mode=async`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job: String,
    pub session: String,
    pub state: JobState,
    pub revision: Option<u64>,
    pub error: Option<ErrorBody>,
}

struct Inner {
    sessions: RwLock<HashMap<String, Arc<Entry>>>,
    jobs: Mutex<HashMap<String, JobStatus>>,
    persist_dir: Option<PathBuf>,
}

/// Shared state of the service.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Creates the store, restoring any sessions saved in the persist directory.
    pub fn new(config: &ServiceConfig) -> std::io::Result<Self> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &config.persist_dir {
            std::fs::create_dir_all(dir)?;
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().is_none_or(|e| e != "json") {
                    continue;
                }
                match load(&path) {
                    Ok(session) => {
                        let id = session.id().to_string();
                        sessions.insert(id, Arc::new(entry_for(session)?));
                    }
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                }
            }
            log::info!("restored {} sessions from {}", sessions.len(), dir.display());
        }
        Ok(Self {
            inner: Arc::new(Inner {
                sessions: RwLock::new(sessions),
                jobs: Mutex::new(HashMap::new()),
                persist_dir: config.persist_dir.clone(),
            }),
        })
    }

    fn entry(&self, id: &str) -> Result<Arc<Entry>, ApiError> {
        self.inner
            .sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or(ApiError::NotFound { kind: "session" })
    }
}

fn load(path: &Path) -> Result<Session, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let saved: PersistedSession = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Session::restore(saved).map_err(|e| e.to_string())
}

fn entry_for(session: Session) -> std::io::Result<Entry> {
    let view = session.view().map_err(std::io::Error::other)?;
    Ok(Entry {
        session: Arc::new(AsyncMutex::new(session)),
        view: RwLock::new(Arc::new(view)),
    })
}

/// Refreshes the snapshot and saves the session. Runs on a blocking thread.
fn commit(inner: &Inner, entry: &Entry, session: &Session) -> Result<Arc<SessionView>, ApiError> {
    let view = Arc::new(session.view()?);
    *entry.view.write().expect("view lock poisoned") = view.clone();
    if let Some(dir) = &inner.persist_dir {
        let path = dir.join(format!("{}.json", session.id()));
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(&session.to_persisted()).map_err(|e| ApiError::Internal(e.to_string()))?;
        std::fs::write(&tmp, text)
            .and_then(|()| std::fs::rename(&tmp, &path))
            .map_err(|e| ApiError::Internal(format!("saving {}: {e}", path.display())))?;
    }
    Ok(view)
}

fn parse_json(body: &[u8]) -> Result<serde_json::Value, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))
}

/// Deserializes `value`; shape errors are `422` naming the offending field.
fn from_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T, ApiError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::Invalid(vec![FieldError {
            field,
            message: e.into_inner().to_string(),
        }])
    })
}

/// Parses a JSON body: syntax errors are `400`, shape errors `422`.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    from_value(parse_json(body)?)
}

/// Dispatches on `kind` by hand: serde buffers internally tagged enums,
/// which loses the path to a nested error.
fn parse_task_spec(body: &[u8]) -> Result<TaskSpec, ApiError> {
    let mut value = parse_json(body)?;
    let kind = value
        .as_object_mut()
        .ok_or_else(|| ApiError::invalid("body", "expected a JSON object"))?
        .remove("kind");
    match kind.as_ref().and_then(|k| k.as_str()) {
        Some("gridworld") => Ok(TaskSpec::Gridworld(from_value(value)?)),
        Some("placement") => Ok(TaskSpec::Placement(from_value(value)?)),
        _ => Err(ApiError::invalid("kind", "must be \"gridworld\" or \"placement\"")),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

fn busy() -> ApiError {
    ApiError::Conflict("the session is processing another request".into())
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let spec = parse_task_spec(&body)?;
    let problems = spec.validate();
    if !problems.is_empty() {
        return Err(ApiError::Invalid(problems));
    }
    let id = uuid::Uuid::new_v4().to_string();
    let inner = state.inner.clone();
    let view = blocking(move || {
        let session = Session::new(id.clone(), spec)?;
        let entry = Arc::new(entry_for(session).map_err(|e| ApiError::Internal(e.to_string()))?);
        let view = {
            let session = entry.session.try_lock().map_err(|_| busy())?;
            commit(&inner, &entry, &session)?
        };
        inner.sessions.write().expect("session map poisoned").insert(id, entry);
        Ok(view)
    })
    .await?;
    log::info!("created session {}", view.id);
    let location = format!("/sessions/{}", view.id);
    Ok((StatusCode::CREATED, [(header::LOCATION, location)], Json(view.as_ref().clone())).into_response())
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(state.entry(&id)?.snapshot().as_ref().clone()))
}

async fn get_heatmap(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Heatmap>, ApiError> {
    Ok(Json(state.entry(&id)?.snapshot().heatmap.clone()))
}

async fn get_query(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<QueryView>, ApiError> {
    let entry = state.entry(&id)?;
    let mut session = entry.session.clone().try_lock_owned().map_err(|_| busy())?;
    let inner = state.inner.clone();
    let view = blocking(move || {
        let before = session.revision();
        let view = session.next_query()?;
        if session.revision() != before {
            commit(&inner, &entry, &session)?;
        }
        Ok(view)
    })
    .await?;
    Ok(Json(view))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub answer: QueryAnswer,
    /// Revision the answer was made against; stale answers are rejected.
    #[serde(default)]
    pub revision: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AnswerMode {
    #[default]
    Blocking,
    Async,
}

#[derive(Debug, Default, Deserialize)]
struct AnswerParams {
    #[serde(default)]
    mode: AnswerMode,
}

async fn post_answer(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    UrlQuery(params): UrlQuery<AnswerParams>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let request: AnswerRequest = parse_body(&body)?;
    let entry = state.entry(&id)?;
    let mut session = entry.session.clone().try_lock_owned().map_err(|_| busy())?;
    session.check_answer(&request.answer, request.revision)?;

    let inner = state.inner.clone();
    let work = move || -> Result<Arc<SessionView>, ApiError> {
        session.submit_answer(&request.answer, request.revision)?;
        commit(&inner, &entry, &session)
    };

    match params.mode {
        AnswerMode::Blocking => {
            let view = blocking(work).await?;
            Ok(Json(view.as_ref().clone()).into_response())
        }
        AnswerMode::Async => {
            let job = uuid::Uuid::new_v4().to_string();
            let status = JobStatus {
                job: job.clone(),
                session: id.clone(),
                state: JobState::Running,
                revision: None,
                error: None,
            };
            state.inner.jobs.lock().expect("job map poisoned").insert(job.clone(), status.clone());
            let inner = state.inner.clone();
            let token = job.clone();
            tokio::spawn(async move {
                let outcome = blocking(work).await;
                let mut jobs = inner.jobs.lock().expect("job map poisoned");
                if let Some(status) = jobs.get_mut(&token) {
                    match outcome {
                        Ok(view) => {
                            status.state = JobState::Done;
                            status.revision = Some(view.revision);
                        }
                        Err(e) => {
                            status.state = JobState::Failed;
                            status.error = Some(e.body());
                        }
                    }
                }
            });
            let location = format!("/sessions/{id}/jobs/{job}");
            Ok((StatusCode::ACCEPTED, [(header::LOCATION, location)], Json(status)).into_response())
        }
    }
}

async fn get_job(State(state): State<AppState>, UrlPath((id, job)): UrlPath<(String, String)>) -> Result<Json<JobStatus>, ApiError> {
    state.entry(&id)?;
    state
        .inner
        .jobs
        .lock()
        .expect("job map poisoned")
        .get(&job)
        .filter(|j| j.session == id)
        .cloned()
        .map(Json)
        .ok_or(ApiError::NotFound { kind: "job" })
}

async fn get_schema() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/schema+json")], TASK_SPEC_SCHEMA)
}

async fn healthz() -> &'static str {
    "ok"
}

/// All routes, with an optional static-file fallback.
pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let router = Router::new()
        .route("/healthz", get(healthz))
        .route("/schema/task_spec.json", get(get_schema))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/query", get(get_query))
        .route("/sessions/{id}/answer", post(post_answer))
        .route("/sessions/{id}/heatmap", get(get_heatmap))
        .route("/sessions/{id}/jobs/{job}", get(get_job))
        .with_state(state);
    match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router,
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::new(&config)?;
    let app = router(state, config.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}
