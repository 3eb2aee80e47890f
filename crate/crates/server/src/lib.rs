//! HTTP and server-sent event front end for an [`Engine`].
//!
//! | method | path | body |
//! |---|---|---|
//! | `POST` | `/api/v1/ingest` | `{"paths": [...]}` → `{"job_id"}` |
//! | `GET` | `/api/v1/jobs/{id}` | → `{"state", "report", "error"}` |
//! | `POST` | `/api/v1/query` | `{"question", "mode"}` → SSE stream |
//! | `GET` | `/api/v1/graph/stats` | → `{"nodes", "edges", "chunks"}` |
//! | `GET` | `/api/v1/graph/search?q=&k=` | → matching nodes and their edges |
//! | `GET` | `/api/v1/healthz` | → `{"status", "stats"}` |
//!
//! The query stream carries one SSE event per [`PipelineEvent`], named
//! `stage`, `token`, `verdict`, `done` or `error`, with the event fields as
//! JSON data. The stream ends after `done` or `error`.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgrag::config::QueryMode;
use kgrag::orchestrator::{Engine, IngestReport, PipelineEvent};
use kgrag::store::{normalize_name, EntityNode, GraphStore, IndexKind, RelationEdge};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio_stream::wrappers::UnboundedReceiverStream;
use tokio_stream::{Stream, StreamExt};

const DEFAULT_SEARCH_K: usize = 10;
const MAX_SEARCH_K: usize = 100;
const EXCERPT_CHARS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Job {
    pub state: JobState,
    pub report: Option<IngestReport>,
    pub error: Option<String>,
}

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    jobs: Arc<Mutex<BTreeMap<String, Job>>>,
    next_job: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Self {
        Self { engine, jobs: Default::default(), next_job: Default::default() }
    }
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/api/v1/ingest", post(ingest))
        .route("/api/v1/jobs/:id", get(job))
        .route("/api/v1/query", post(query))
        .route("/api/v1/graph/stats", get(stats))
        .route("/api/v1/graph/search", get(search))
        .route("/api/v1/healthz", get(healthz))
        .with_state(AppState::new(engine))
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(engine: Arc<Engine>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(engine)).await
}

/// [`serve`] on a fresh multi-threaded runtime, for synchronous callers.
pub fn run(engine: Arc<Engine>, addr: &str) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(engine, addr))
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Deserialize)]
struct IngestRequest {
    paths: Vec<PathBuf>,
}

async fn ingest(State(state): State<AppState>, Json(req): Json<IngestRequest>) -> Result<impl IntoResponse, ApiError> {
    if req.paths.is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "paths must not be empty".into()));
    }
    let job_id = format!("job-{}", state.next_job.fetch_add(1, Ordering::Relaxed) + 1);
    state.jobs.lock().insert(job_id.clone(), Job { state: JobState::Queued, report: None, error: None });
    let (jobs, engine, id) = (state.jobs.clone(), state.engine.clone(), job_id.clone());
    tokio::task::spawn_blocking(move || {
        set_job(&jobs, &id, Job { state: JobState::Running, report: None, error: None });
        let job = match engine.ingest(&req.paths) {
            Ok(report) => Job { state: JobState::Succeeded, report: Some(report), error: None },
            Err(e) => {
                tracing::warn!(job = %id, error = %e, "ingest failed");
                Job { state: JobState::Failed, report: None, error: Some(e.to_string()) }
            }
        };
        set_job(&jobs, &id, job);
    });
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": job_id }))))
}

fn set_job(jobs: &Mutex<BTreeMap<String, Job>>, id: &str, job: Job) {
    jobs.lock().insert(id.to_string(), job);
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Job>, ApiError> {
    state
        .jobs
        .lock()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no job {id:?}")))
}

#[derive(Deserialize)]
struct QueryRequest {
    question: String,
    #[serde(default)]
    mode: Option<QueryMode>,
}

async fn query(
    State(state): State<AppState>,
    Json(req): Json<QueryRequest>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    if req.question.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "question must not be empty".into()));
    }
    let mode = req.mode.unwrap_or(state.engine.config().pipeline.mode);
    let (tx, rx) = tokio::sync::mpsc::unbounded_channel::<PipelineEvent>();
    let engine = state.engine.clone();
    tokio::task::spawn_blocking(move || {
        // A closed receiver means the client went away; the run finishes anyway.
        let result = engine.answer(&req.question, mode, &mut |event| {
            let _ = tx.send(event);
        });
        if let Err(e) = result {
            tracing::warn!(error = %e, "query failed");
        }
    });
    let events = UnboundedReceiverStream::new(rx).map(|event| Ok(to_sse(&event)));
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

fn to_sse(event: &PipelineEvent) -> Event {
    Event::default().event(event.name()).data(event.payload().to_string())
}

async fn stats(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.engine.snapshot().stats())
}

async fn healthz(State(state): State<AppState>) -> impl IntoResponse {
    Json(serde_json::json!({ "status": "ok", "stats": state.engine.snapshot().stats() }))
}

#[derive(Deserialize)]
struct SearchParams {
    q: String,
    k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub chunk_id: String,
    pub doc_id: String,
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMatch {
    #[serde(flatten)]
    pub node: EntityNode,
    pub score: f64,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMatch {
    #[serde(flatten)]
    pub edge: RelationEdge,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub nodes: Vec<NodeMatch>,
    pub edges: Vec<EdgeMatch>,
}

async fn search(
    State(state): State<AppState>,
    Query(params): Query<SearchParams>,
) -> Result<Json<SearchResult>, ApiError> {
    if params.q.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "q must not be empty".into()));
    }
    let k = params.k.unwrap_or(DEFAULT_SEARCH_K).clamp(1, MAX_SEARCH_K);
    let engine = state.engine.clone();
    let result = tokio::task::spawn_blocking(move || search_store(&engine, &params.q, k))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(result))
}

/// Nodes whose name contains the query; when none do, the nearest nodes by
/// embedding. Edges are those touching a matched node.
pub fn search_store(engine: &Engine, q: &str, k: usize) -> SearchResult {
    let store = engine.snapshot();
    let needle = normalize_name(q);
    let mut hits: Vec<(String, f64)> =
        store.nodes().filter(|n| n.node_id.contains(&needle)).map(|n| (n.node_id.clone(), 1.0)).take(k).collect();
    if hits.is_empty() && !store.is_empty() {
        hits = engine
            .gateway()
            .embed(&[q.to_string()])
            .ok()
            .and_then(|v| store.knn(&v[0], k, IndexKind::Node).ok())
            .unwrap_or_default()
            .into_iter()
            .filter_map(|(key, score)| key.strip_prefix("n:").map(|id| (id.to_string(), score)))
            .collect();
    }
    let nodes: Vec<NodeMatch> = hits
        .iter()
        .filter_map(|(id, score)| {
            let node = store.node(id)?.clone();
            let provenance = provenance(&store, &node.chunk_refs);
            Some(NodeMatch { node, score: *score, provenance })
        })
        .collect();
    let ids: std::collections::BTreeSet<String> = nodes.iter().map(|m| m.node.node_id.clone()).collect();
    let (edge_ids, _) = store.neighborhood(&ids);
    let edges = edge_ids
        .iter()
        .filter_map(|(s, d)| {
            let edge = store.edge(s, d)?.clone();
            let provenance = provenance(&store, &edge.chunk_refs);
            Some(EdgeMatch { edge, provenance })
        })
        .collect();
    SearchResult { nodes, edges }
}

fn provenance<'a>(store: &GraphStore, refs: impl IntoIterator<Item = &'a String>) -> Vec<Provenance> {
    refs.into_iter()
        .filter_map(|id| store.chunk(id))
        .map(|c| Provenance {
            chunk_id: c.chunk_id.clone(),
            doc_id: c.doc_id.clone(),
            excerpt: c.text.chars().take(EXCERPT_CHARS).collect(),
        })
        .collect()
}
