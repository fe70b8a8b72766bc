//! HTTP consultation service.
//!
//! Sessions hold the live dialogue; each posted message runs one
//! distill-retrieve-read turn over the accumulated history. The index sits
//! behind a swappable `Arc`, so an ingest replaces it atomically while
//! in-flight requests finish on the old one.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::index::{
    load_database, parse_database, CandidateKey, Granularity, IndexError, IndexStats,
    KnowledgeIndex, MedicineRecord,
};
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError, Step, TurnResult};
use crate::toolcall::DialogueHistory;

const SESSIONS_FILE: &str = "sessions.json";
const INGESTED_DB_FILE: &str = "ingested_database.json";

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("distillrag-data")
}

/// Service configuration file (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Binding to a non-loopback address requires this flag.
    #[serde(default)]
    pub allow_public: bool,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    pub database: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

impl ServiceConfig {
    /// Loads a TOML config; relative paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ServiceConfig =
            toml::from_str(&text).map_err(|e| ServiceError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data_dir);
        resolve(&mut cfg.database);
        if let Some(c) = cfg.cache_dir.as_mut() {
            resolve(c);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("index: {0}")]
    Index(#[from] IndexError),
    #[error("pipeline: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceView {
    pub key: CandidateKey,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTurn {
    pub question: String,
    pub answer: String,
    pub distilled_query: String,
    /// False when the query came from the fallback builder.
    pub distill_followed: bool,
    pub evidence: Vec<EvidenceView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub turns: Vec<SessionTurn>,
}

impl Session {
    /// The (question, answer) pairs of all stored turns.
    pub fn history(&self) -> DialogueHistory {
        let mut h = DialogueHistory::default();
        for t in &self.turns {
            h.push(t.question.clone(), t.answer.clone());
        }
        h
    }
}

/// Sessions persisted as one JSON file, rewritten atomically on change.
pub struct SessionStore {
    path: PathBuf,
    sessions: RwLock<BTreeMap<String, Session>>,
    write_lock: Mutex<()>,
    turn_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl SessionStore {
    pub fn open(data_dir: &Path) -> Result<Self, ServiceError> {
        fs::create_dir_all(data_dir)
            .map_err(|e| ServiceError::Storage(format!("{}: {e}", data_dir.display())))?;
        let path = data_dir.join(SESSIONS_FILE);
        let sessions = if path.exists() {
            let text = fs::read_to_string(&path)
                .map_err(|e| ServiceError::Storage(e.to_string()))?;
            serde_json::from_str(&text).map_err(|e| ServiceError::Storage(e.to_string()))?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            path,
            sessions: RwLock::new(sessions),
            write_lock: Mutex::new(()),
            turn_locks: Mutex::new(HashMap::new()),
        })
    }

    fn persist(&self) -> Result<(), ServiceError> {
        let _guard = self.write_lock.lock();
        let body = serde_json::to_vec_pretty(&*self.sessions.read())
            .map_err(|e| ServiceError::Storage(e.to_string()))?;
        write_atomic(&self.path, &body).map_err(|e| ServiceError::Storage(e.to_string()))
    }

    pub fn create(&self) -> Result<Session, ServiceError> {
        let session = Session {
            session_id: uuid::Uuid::new_v4().simple().to_string(),
            created_at: Utc::now(),
            turns: Vec::new(),
        };
        self.sessions
            .write()
            .insert(session.session_id.clone(), session.clone());
        self.persist()?;
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Option<Session> {
        self.sessions.read().get(id).cloned()
    }

    /// Exclusive lock serializing turns within one session.
    pub fn turn_lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.turn_locks
            .lock()
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    pub fn append_turn(&self, id: &str, turn: SessionTurn) -> Result<usize, ServiceError> {
        let index = {
            let mut map = self.sessions.write();
            let s = map
                .get_mut(id)
                .ok_or_else(|| ServiceError::Storage(format!("session {id} vanished")))?;
            s.turns.push(turn);
            s.turns.len() - 1
        };
        self.persist()?;
        Ok(index)
    }
}

/// Writes via a temporary file and rename.
pub fn write_atomic(path: &Path, body: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, body)?;
    fs::rename(tmp, path)
}

pub struct AppState {
    index: RwLock<Arc<KnowledgeIndex>>,
    pipeline: Pipeline,
    sessions: SessionStore,
    ingesting: AtomicBool,
    data_dir: PathBuf,
    cache_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(
        index: KnowledgeIndex,
        pipeline: Pipeline,
        data_dir: &Path,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self, ServiceError> {
        Ok(Self {
            index: RwLock::new(Arc::new(index)),
            pipeline,
            sessions: SessionStore::open(data_dir)?,
            ingesting: AtomicBool::new(false),
            data_dir: data_dir.to_path_buf(),
            cache_dir,
        })
    }

    /// Builds the state from a config: previously ingested data wins over
    /// the configured database file.
    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let pipeline = Pipeline::from_config(config.pipeline.clone())?;
        let ingested = config.data_dir.join(INGESTED_DB_FILE);
        let db_path = if ingested.exists() {
            ingested
        } else {
            config.database.clone()
        };
        let records = load_database(&db_path)?;
        let index = build_index(records, &pipeline, config.cache_dir.as_deref())?;
        Self::new(index, pipeline, &config.data_dir, config.cache_dir.clone())
    }

    pub fn index(&self) -> Arc<KnowledgeIndex> {
        self.index.read().clone()
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }
}

fn build_index(
    records: Vec<MedicineRecord>,
    pipeline: &Pipeline,
    cache_dir: Option<&Path>,
) -> Result<KnowledgeIndex, IndexError> {
    let emb = pipeline.embedder().as_ref();
    match cache_dir {
        Some(dir) => KnowledgeIndex::build_cached(records, emb, dir),
        None => KnowledgeIndex::build(records, emb),
    }
}

/// Structured error body: `{error_code, message, step?}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    step: Option<Step>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            step: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error_code": self.code, "message": self.message});
        if let Some(step) = self.step {
            body["step"] = json!(step);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, code) = match &e {
            PipelineError::EmptyQuestion => (StatusCode::BAD_REQUEST, "empty_question"),
            PipelineError::Aborted(_) => (StatusCode::UNPROCESSABLE_ENTITY, "aborted"),
            PipelineError::Transport { .. } => (StatusCode::BAD_GATEWAY, "upstream_failure"),
            PipelineError::Retrieval(IndexError::EmptyQuery) => {
                (StatusCode::BAD_REQUEST, "empty_query")
            }
            PipelineError::Retrieval(IndexError::InvalidNum) => {
                (StatusCode::BAD_REQUEST, "invalid_num")
            }
            PipelineError::Retrieval(IndexError::Embedding { .. }) => {
                (StatusCode::BAD_GATEWAY, "upstream_failure")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            code,
            message: e.to_string(),
            step: e.step(),
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_failure", e.to_string())
    }
}

fn join_error(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/messages", post(post_message))
        .route("/api/search", get(search))
        .route("/api/admin/ingest", post(ingest))
        .with_state(state)
}

async fn health(State(state): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "index": state.index().stats()}))
}

async fn create_session(State(state): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    let s = tokio::task::spawn_blocking(move || state.sessions.create())
        .await
        .map_err(join_error)??;
    Ok((StatusCode::CREATED, Json(json!({"session_id": s.session_id}))))
}

fn unknown_session(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id}"))
}

async fn get_session(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Session>, ApiError> {
    state.sessions.get(&id).map(Json).ok_or_else(|| unknown_session(&id))
}

#[derive(Debug, Deserialize)]
pub struct MessageRequest {
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub answer: String,
    pub distilled_query: String,
    pub distill_followed: bool,
    pub evidence: Vec<EvidenceView>,
    pub turn_index: usize,
    pub trace_id: String,
    pub timings: serde_json::Value,
}

fn project(turn: &TurnResult) -> SessionTurn {
    SessionTurn {
        question: turn.question.clone(),
        answer: turn.answer.clone(),
        distilled_query: turn.query.clone(),
        distill_followed: turn.distilled.followed(),
        evidence: turn
            .retrieval
            .candidates
            .iter()
            .map(|c| EvidenceView {
                key: c.key.clone(),
                score: c.score,
                text: c.evidence_text.clone(),
            })
            .collect(),
    }
}

async fn post_message(
    State(state): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<TurnResponse>, ApiError> {
    let req: MessageRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.to_string()))?;
    if state.sessions.get(&id).is_none() {
        return Err(unknown_session(&id));
    }
    if req.question.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_question", "question is empty"));
    }
    tokio::task::spawn_blocking(move || {
        let lock = state.sessions.turn_lock(&id);
        let _guard = lock.lock();
        // Re-read under the session lock so history includes every prior turn.
        let session = state.sessions.get(&id).ok_or_else(|| unknown_session(&id))?;
        let index = state.index();
        let turn = state
            .pipeline
            .run_turn(&index, &session.history(), &req.question)?;
        let stored = project(&turn);
        let turn_index = state.sessions.append_turn(&id, stored.clone())?;
        Ok(Json(TurnResponse {
            answer: stored.answer,
            distilled_query: stored.distilled_query,
            distill_followed: stored.distill_followed,
            evidence: stored.evidence,
            turn_index,
            trace_id: turn.trace_id,
            timings: serde_json::to_value(&turn.timings).unwrap_or_default(),
        }))
    })
    .await
    .map_err(join_error)?
}

#[derive(Debug, Deserialize)]
pub struct SearchParams {
    pub q: Option<String>,
    pub granularity: Option<String>,
    pub num: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub granularity: Granularity,
    pub candidates: Vec<EvidenceView>,
}

async fn search(
    State(state): State<Shared>,
    Query(params): Query<SearchParams>,
) -> Result<Json<SearchResponse>, ApiError> {
    let bad = |m: &str| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", m);
    let q = params.q.unwrap_or_default();
    if q.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty_query", "q is empty"));
    }
    let defaults = &state.pipeline.config().retrieval;
    let granularity = match params.granularity.as_deref() {
        None => defaults.granularity,
        Some("coarse") => Granularity::Coarse,
        Some("fine") => Granularity::Fine,
        Some(_) => return Err(bad("granularity must be coarse or fine")),
    };
    let num = match params.num.as_deref() {
        None => defaults.num,
        Some(n) => match n.parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => return Err(bad("num must be an integer >= 1")),
        },
    };
    tokio::task::spawn_blocking(move || {
        let index = state.index();
        let r = state.pipeline.retrieve_as(&index, &q, granularity, num)?;
        Ok(Json(SearchResponse {
            granularity: r.granularity,
            candidates: r
                .candidates
                .into_iter()
                .map(|c| EvidenceView {
                    key: c.key,
                    score: c.score,
                    text: c.evidence_text,
                })
                .collect(),
        }))
    })
    .await
    .map_err(join_error)?
}

struct IngestGuard<'a>(&'a AtomicBool);

impl<'a> IngestGuard<'a> {
    fn acquire(flag: &'a AtomicBool) -> Option<Self> {
        flag.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| Self(flag))
    }
}

impl Drop for IngestGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

fn ingest_blocking(state: &AppState, body: &[u8]) -> Result<IndexStats, ApiError> {
    let _guard = IngestGuard::acquire(&state.ingesting).ok_or_else(|| {
        ApiError::new(StatusCode::CONFLICT, "ingest_running", "another ingest is running")
    })?;
    let text = std::str::from_utf8(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "schema_violation", e.to_string()))?;
    let records = parse_database(text)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "schema_violation", e.to_string()))?;
    let index = build_index(records, &state.pipeline, state.cache_dir.as_deref()).map_err(|e| {
        let code = match e {
            IndexError::DuplicateEntity(_) => "duplicate_entity",
            IndexError::EmptyDatabase => "empty_database",
            IndexError::Embedding { .. } => {
                return ApiError::new(StatusCode::BAD_GATEWAY, "upstream_failure", e.to_string())
            }
            _ => "schema_violation",
        };
        ApiError::new(StatusCode::BAD_REQUEST, code, e.to_string())
    })?;
    write_atomic(&state.data_dir.join(INGESTED_DB_FILE), body)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_failure", e.to_string()))?;
    let stats = index.stats();
    *state.index.write() = Arc::new(index);
    Ok(stats)
}

async fn ingest(
    State(state): State<Shared>,
    body: Bytes,
) -> Result<Json<IndexStats>, ApiError> {
    tokio::task::spawn_blocking(move || ingest_blocking(&state, &body).map(Json))
        .await
        .map_err(join_error)?
}

/// Checks that `listen` is loopback unless public binding is allowed.
pub fn check_bind(listen: &str, allow_public: bool) -> Result<SocketAddr, ServiceError> {
    let addr: SocketAddr = listen
        .parse()
        .map_err(|e| ServiceError::Config(format!("listen {listen:?}: {e}")))?;
    if !addr.ip().is_loopback() && !allow_public {
        return Err(ServiceError::Config(format!(
            "refusing to bind {addr} without allow_public = true"
        )));
    }
    Ok(addr)
}

/// Serves until `shutdown` resolves. `on_bound` receives the bound address.
pub async fn serve(
    state: Shared,
    addr: SocketAddr,
    on_bound: impl FnOnce(SocketAddr),
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}
