//! HTTP session service: create tutoring sessions, ask for the next
//! concept, submit answers and read mastery back.

mod error;
pub mod eventlog;

use std::collections::HashMap;
use std::future::Future;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use indexmap::IndexMap;
use kctutor_core::engine::{check_history, infer_posteriors, InteractionRecord};
use kctutor_core::generator::{fnv1a, GenerationRequest, GenerationResult, MasteryEntry, QuestionSource};
use kctutor_core::policy::select_best_kc;
use kctutor_core::tree::NodeRecord;
use kctutor_core::{Difficulty, KcId, KcTree, Kt2Params, PosteriorState, StudentHistory};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::trace::{DefaultMakeSpan, DefaultOnResponse, TraceLayer};
use tracing::Level;

pub use error::{ApiError, ServiceError};
use eventlog::{Event, EventLog};

/// Trees and parameter sets loaded at startup, addressed by id.
#[derive(Debug, Default, Clone)]
pub struct Catalog {
    trees: IndexMap<String, Arc<KcTree>>,
    params: IndexMap<String, (String, Arc<Kt2Params>)>,
}

impl Catalog {
    pub fn add_tree(&mut self, id: impl Into<String>, tree: KcTree) -> &mut Self {
        self.trees.insert(id.into(), Arc::new(tree));
        self
    }

    /// Registers parameters fitted for the tree `tree_id`.
    pub fn add_params(&mut self, id: impl Into<String>, tree_id: &str, params: Kt2Params) -> Result<&mut Self, ServiceError> {
        let tree = self.trees.get(tree_id).ok_or_else(|| ServiceError::Catalog(format!("unknown tree {tree_id:?}")))?;
        params.validate(tree).map_err(|e| ServiceError::Catalog(e.to_string()))?;
        self.params.insert(id.into(), (tree_id.to_string(), Arc::new(params)));
        Ok(self)
    }

    pub fn tree(&self, id: &str) -> Option<&Arc<KcTree>> {
        self.trees.get(id)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
    pub event_log: Option<std::path::PathBuf>,
}

#[derive(Debug)]
struct Session {
    id: String,
    tree_id: String,
    params_id: String,
    tree: Arc<KcTree>,
    params: Arc<Kt2Params>,
    history: StudentHistory,
    created_at_ms: u64,
    updated_at_ms: u64,
    /// Cached until the next answer so repeated reads agree.
    recommendation: Option<Recommendation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub tree: String,
    pub params: String,
    /// Every node, in tree order.
    pub mastery: PosteriorState,
    pub total: f64,
    pub history: Vec<InteractionRecord>,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafValue {
    pub kc: KcId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub kc: KcId,
    pub kc_name: String,
    pub education_value: f64,
    pub baseline: f64,
    pub values: Vec<LeafValue>,
    /// Current leaf mastery.
    pub mastery: IndexMap<KcId, f64>,
    pub question: Option<GenerationResult>,
    pub history_len: usize,
}

pub struct AppState {
    catalog: Catalog,
    sessions: RwLock<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    source: Option<Arc<dyn QuestionSource>>,
    log: Option<EventLog>,
}

impl AppState {
    /// Builds the state, replaying the event log if one is configured.
    pub fn new(
        catalog: Catalog,
        source: Option<Arc<dyn QuestionSource>>,
        config: &ServiceConfig,
    ) -> Result<Arc<AppState>, ServiceError> {
        let (log, events) = match &config.event_log {
            Some(p) => {
                let (log, events) = EventLog::open(Path::new(p))?;
                (Some(log), events)
            }
            None => (None, Vec::new()),
        };
        let state = AppState { catalog, sessions: RwLock::new(HashMap::new()), source, log };
        state.replay(events)?;
        Ok(Arc::new(state))
    }

    fn replay(&self, events: Vec<Event>) -> Result<(), ServiceError> {
        let mut sessions = self.sessions.write().unwrap_or_else(|e| e.into_inner());
        for (i, ev) in events.into_iter().enumerate() {
            let bad = |message: String| ServiceError::Replay { line: i + 1, message };
            match ev {
                Event::Create { session_id, tree, params, history, at_ms } => {
                    let s = self
                        .new_session(session_id.clone(), &tree, &params, history, at_ms)
                        .map_err(|e| bad(e.to_string()))?;
                    sessions.insert(session_id, Arc::new(tokio::sync::Mutex::new(s)));
                }
                Event::Answer { session_id, kc, correct, at_ms } => {
                    let s = sessions.get(&session_id).ok_or_else(|| bad(format!("unknown session {session_id:?}")))?;
                    let mut s = s.try_lock().expect("replay is single-threaded");
                    s.history = s
                        .history
                        .append_observation(&s.tree, &kc, correct, Difficulty::Medium)
                        .map_err(|e| bad(e.to_string()))?;
                    s.updated_at_ms = at_ms;
                }
            }
        }
        Ok(())
    }

    fn new_session(
        &self,
        id: String,
        tree_id: &str,
        params_id: &str,
        records: Vec<InteractionRecord>,
        at_ms: u64,
    ) -> Result<Session, ApiError> {
        let tree = self.catalog.trees.get(tree_id).ok_or_else(|| ApiError::not_found("tree", tree_id))?;
        let (owner, params) = self.catalog.params.get(params_id).ok_or_else(|| ApiError::not_found("params", params_id))?;
        if owner != tree_id {
            return Err(ApiError::Unprocessable(format!("params {params_id:?} belong to tree {owner:?}, not {tree_id:?}")));
        }
        let history = StudentHistory { student_id: id.clone(), records };
        check_history(tree, &history)?;
        Ok(Session {
            id,
            tree_id: tree_id.to_string(),
            params_id: params_id.to_string(),
            tree: tree.clone(),
            params: params.clone(),
            history,
            created_at_ms: at_ms,
            updated_at_ms: at_ms,
            recommendation: None,
        })
    }

    fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        let sessions = self.sessions.read().unwrap_or_else(|e| e.into_inner());
        sessions.get(id).cloned().ok_or_else(|| ApiError::not_found("session", id))
    }

    fn log(&self, event: &Event) -> Result<(), ApiError> {
        match &self.log {
            Some(l) => l.append(event).map_err(|e| ApiError::Internal(e.to_string())),
            None => Ok(()),
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).len()
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// 128 random bits, hex encoded.
fn new_session_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid JSON body: {e}")))
}

fn snapshot(s: &Session) -> Result<Snapshot, ApiError> {
    let mastery = infer_posteriors(&s.params, &s.tree, &s.history)?;
    Ok(Snapshot {
        session_id: s.id.clone(),
        tree: s.tree_id.clone(),
        params: s.params_id.clone(),
        total: mastery.total(),
        mastery,
        history: s.history.records.clone(),
        created_at_ms: s.created_at_ms,
        updated_at_ms: s.updated_at_ms,
    })
}

fn recommend(
    tree: &KcTree,
    params: &Kt2Params,
    history: &StudentHistory,
    source: Option<&dyn QuestionSource>,
    seed: u64,
) -> Result<Recommendation, ApiError> {
    let outcome = select_best_kc(params, tree, history)?;
    let state = infer_posteriors(params, tree, history)?;
    let leaves = tree.leaves();
    let name = |k: &KcId| tree.name(k.as_str()).unwrap_or(k.as_str()).to_string();
    let question = match source {
        Some(src) => {
            let snapshot = leaves
                .iter()
                .map(|k| MasteryEntry { kc: k.clone(), name: name(k), mastery: state.get(k.as_str()).unwrap_or(0.0) })
                .collect();
            let req = GenerationRequest::new(snapshot, leaves.clone(), Some(outcome.selected.clone()))
                .map_err(|e| ApiError::Internal(e.to_string()))?;
            Some(src.generate(&req, seed).map_err(|e| ApiError::Internal(e.to_string()))?)
        }
        None => None,
    };
    let value = outcome.value_of(&outcome.selected).unwrap_or(f64::NAN);
    let baseline = outcome.per_candidate.first().map(|e| e.baseline).unwrap_or(f64::NAN);
    Ok(Recommendation {
        kc_name: name(&outcome.selected),
        kc: outcome.selected,
        education_value: value,
        baseline,
        values: outcome.per_candidate.into_iter().map(|e| LeafValue { kc: e.kc, value: e.value }).collect(),
        mastery: leaves.iter().map(|k| (k.clone(), state.get(k.as_str()).unwrap_or(0.0))).collect(),
        question,
        history_len: history.len(),
    })
}

#[derive(Deserialize)]
struct CreateBody {
    tree: String,
    params: String,
    #[serde(default)]
    history: Vec<InteractionRecord>,
}

#[derive(Deserialize)]
struct AnswerBody {
    kc: KcId,
    correct: bool,
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateBody = parse_body(&body)?;
    let id = new_session_id();
    let at = now_ms();
    let session = app.new_session(id.clone(), &req.tree, &req.params, req.history.clone(), at)?;
    let snap = snapshot(&session)?;
    app.log(&Event::Create { session_id: id.clone(), tree: req.tree, params: req.params, history: req.history, at_ms: at })?;
    app.sessions
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "session_id": id, "state": snap }))))
}

async fn get_state(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Snapshot>, ApiError> {
    let s = app.session(&id)?;
    let s = s.lock().await;
    Ok(Json(snapshot(&s)?))
}

async fn submit_answer(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<Snapshot>, ApiError> {
    let req: AnswerBody = parse_body(&body)?;
    let s = app.session(&id)?;
    let mut s = s.lock().await;
    let next = s.history.append_observation(&s.tree, &req.kc, req.correct, Difficulty::Medium)?;
    let at = now_ms();
    app.log(&Event::Answer { session_id: id, kc: req.kc, correct: req.correct, at_ms: at })?;
    s.history = next;
    s.updated_at_ms = at;
    s.recommendation = None;
    Ok(Json(snapshot(&s)?))
}

async fn get_recommendation(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Recommendation>, ApiError> {
    let s = app.session(&id)?;
    let mut s = s.lock().await;
    if let Some(r) = &s.recommendation {
        return Ok(Json(r.clone()));
    }
    let (tree, params, history) = (s.tree.clone(), s.params.clone(), s.history.clone());
    let source = app.source.clone();
    let seed = fnv1a(s.id.as_bytes()) ^ history.len() as u64;
    // Selection is CPU-bound and a remote source blocks.
    let rec = tokio::task::spawn_blocking(move || recommend(&tree, &params, &history, source.as_deref(), seed))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    s.recommendation = Some(rec.clone());
    Ok(Json(rec))
}

async fn get_tree(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<serde_json::Value>, ApiError> {
    let tree = app.catalog.tree(&id).ok_or_else(|| ApiError::not_found("tree", id.clone()))?;
    let params: Vec<&String> =
        app.catalog.params.iter().filter(|(_, (t, _))| *t == id).map(|(p, _)| p).collect();
    let nodes: Vec<NodeRecord> = tree.records();
    Ok(Json(serde_json::json!({ "id": id, "root": tree.root(), "nodes": nodes, "params": params })))
}

async fn fallback() -> ApiError {
    ApiError::not_found("route", "")
}

fn cors(origins: &[String]) -> CorsLayer {
    let base = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.is_empty() {
        return base.allow_origin(Any);
    }
    let values: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    base.allow_origin(AllowOrigin::list(values))
}

pub fn router(app: Arc<AppState>, config: &ServiceConfig) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/recommendation", get(get_recommendation))
        .route("/sessions/{id}/answers", post(submit_answer))
        .route("/sessions/{id}/state", get(get_state))
        .route("/trees/{id}", get(get_tree))
        .fallback(fallback)
        .layer(
            TraceLayer::new_for_http()
                .make_span_with(DefaultMakeSpan::new().level(Level::INFO))
                .on_response(DefaultOnResponse::new().level(Level::INFO)),
        )
        .layer(cors(&config.cors_origins))
        .with_state(app)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}
