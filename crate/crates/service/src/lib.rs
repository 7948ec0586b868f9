//! HTTP session service. The agent acts each turn; the client answers.
//!
//! Sessions live in memory and expire after an idle period. In the default
//! human mode the client supplies every response. Sessions opened with
//! `simulated = true` let the rule-based simulator answer instead, one turn
//! per client request.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use converse_core::agent::{Agent, GraphContext, Inference, SelectMode};
use converse_core::catalog::{Catalog, ItemId, UserId, ValueId};
use converse_core::checkpoint::Manifest;
use converse_core::env::{trace_to_jsonl, Action, ActionKind, ConversationState, Env, EpisodeConfig, Status, TraceRecord, UserResponse};
use converse_core::params::ParamSet;
use converse_core::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub const DEFAULT_IDLE: Duration = Duration::from_secs(30 * 60);

/// A trained agent bound to one registered catalog.
pub struct Model {
    pub catalog_id: String,
    pub manifest: Manifest,
    pub agent: Agent,
    pub params: ParamSet,
    global: Matrix,
}

pub struct Registry {
    catalogs: BTreeMap<String, Arc<Catalog>>,
    models: BTreeMap<String, Arc<Model>>,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown catalog {0}")]
    UnknownCatalog(String),
    #[error("checkpoint {0} does not match catalog {1}")]
    Fingerprint(String, String),
}

impl Registry {
    pub fn new() -> Self {
        Self { catalogs: BTreeMap::new(), models: BTreeMap::new() }
    }

    pub fn add_catalog(&mut self, id: impl Into<String>, catalog: Catalog) {
        self.catalogs.insert(id.into(), Arc::new(catalog));
    }

    pub fn add_checkpoint(&mut self, id: impl Into<String>, catalog_id: &str, manifest: Manifest, agent: Agent, params: ParamSet) -> Result<(), RegistryError> {
        let id = id.into();
        let catalog = self.catalogs.get(catalog_id).ok_or_else(|| RegistryError::UnknownCatalog(catalog_id.to_string()))?;
        if catalog.fingerprint() != manifest.catalog_fingerprint {
            return Err(RegistryError::Fingerprint(id, catalog_id.to_string()));
        }
        let global = agent.encoder.global_vectors(&params, &GraphContext::new(catalog).plan);
        self.models.insert(id, Arc::new(Model { catalog_id: catalog_id.to_string(), manifest, agent, params, global }));
        Ok(())
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ActionView {
    pub kind: ActionKind,
    pub ids: Vec<usize>,
    pub names: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Diagnostics {
    /// Policy probabilities `[ask, rec]` over available types.
    pub pi: [f64; 2],
    /// Best Q per type, absent when the type is masked.
    pub q: [Option<f64>; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    pub session_id: String,
    pub catalog_id: String,
    pub checkpoint_id: String,
    pub simulated: bool,
    pub status: Status,
    pub turn: usize,
    pub seed_value: ValueId,
    pub seed_name: String,
    pub last_reward: f64,
    pub total_reward: f64,
    pub candidate_items: usize,
    pub candidate_values: usize,
    pub pending: Option<ActionView>,
    pub diagnostics: Option<Diagnostics>,
    pub transcript: Vec<TraceRecord>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub catalog_id: String,
    pub checkpoint_id: String,
    /// Explicit seed value; drawn from the targets' shared values when absent.
    pub seed_value: Option<ValueId>,
    /// Declared targets, required by simulated sessions and automatic seeds.
    pub targets: Option<Vec<ItemId>>,
    /// Uses this catalog user's items as the targets.
    pub user: Option<UserId>,
    #[serde(default)]
    pub simulated: bool,
    #[serde(default)]
    pub seed: u64,
}

/// A client answer. Questions take `accepted` value ids (the rest count as
/// rejected); recommendation lists take `accepted` item ids or `rejected`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RespondRequest {
    pub accepted: Option<Vec<usize>>,
    #[serde(default)]
    pub rejected: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CatalogInfo {
    pub id: String,
    pub fingerprint: String,
    pub n_users: usize,
    pub n_items: usize,
    pub types: Vec<TypeInfo>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TypeInfo {
    pub id: usize,
    pub name: String,
    pub single_valued: bool,
    pub values: Vec<(ValueId, String)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub catalog_id: String,
    pub manifest: Manifest,
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, msg) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
        };
        (code, Json(serde_json::json!({ "error": msg }))).into_response()
    }
}

struct Session {
    id: String,
    catalog: Arc<Catalog>,
    catalog_id: String,
    model_id: String,
    model: Arc<Model>,
    simulated: bool,
    targets: Vec<ItemId>,
    state: ConversationState,
    pending: Option<Action>,
    diagnostics: Option<Diagnostics>,
    transcript: Vec<TraceRecord>,
    last_reward: f64,
    total_reward: f64,
    touched: Instant,
}

pub struct AppState {
    registry: Registry,
    episode: EpisodeConfig,
    idle: Duration,
    next_id: AtomicU64,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(registry: Registry, episode: EpisodeConfig, idle: Duration) -> Arc<Self> {
        Arc::new(Self { registry, episode, idle, next_id: AtomicU64::new(1), sessions: Mutex::new(BTreeMap::new()) })
    }

    /// Drops sessions idle for longer than the expiry.
    pub fn expire(&self, now: Instant) -> usize {
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        // sessions busy in another request are kept
        map.retain(|_, s| s.try_lock().map(|s| now.duration_since(s.touched) < self.idle).unwrap_or(true));
        before - map.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.expire(Instant::now());
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("unknown session {id}")))
    }
}

fn names(catalog: &Catalog, action: &Action) -> Vec<String> {
    match action {
        Action::Ask(vs) => vs.iter().map(|&p| catalog.value_name(p).to_string()).collect(),
        Action::Rec(items) => items.iter().map(|v| format!("item {v}")).collect(),
    }
}

impl Session {
    /// Lets the agent pick the next action, or clears it when the episode ended.
    fn act(&mut self, episode: &EpisodeConfig) -> Result<(), ApiError> {
        if self.state.is_terminal() {
            self.pending = None;
            self.diagnostics = None;
            return Ok(());
        }
        let m = &self.model;
        let inference = Inference { agent: &m.agent, params: &m.params, catalog: &self.catalog, episode, global: m.global.clone() };
        let eval = inference.evaluate(&self.state);
        let q = [eval.max_q(ActionKind::Ask), eval.max_q(ActionKind::Rec)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let action = eval.select(SelectMode::Greedy, &mut rng, &self.catalog, episode).map_err(|e| ApiError::Conflict(e.to_string()))?;
        self.diagnostics = Some(Diagnostics { pi: eval.probs, q });
        self.pending = Some(action);
        Ok(())
    }

    fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            catalog_id: self.catalog_id.clone(),
            checkpoint_id: self.model_id.clone(),
            simulated: self.simulated,
            status: self.state.status,
            turn: self.state.turn,
            seed_value: self.state.seed_value,
            seed_name: self.catalog.value_name(self.state.seed_value).to_string(),
            last_reward: self.last_reward,
            total_reward: self.total_reward,
            candidate_items: self.state.candidate_items.len(),
            candidate_values: self.state.candidate_values.len(),
            pending: self.pending.as_ref().map(|a| ActionView { kind: a.kind(), ids: a.ids().to_vec(), names: names(&self.catalog, a) }),
            diagnostics: self.diagnostics.clone(),
            transcript: self.transcript.clone(),
        }
    }

    fn response_for(&self, action: &Action, req: &RespondRequest) -> Result<UserResponse, ApiError> {
        match action {
            Action::Ask(values) => {
                if req.rejected {
                    return Err(ApiError::BadRequest("questions take accepted value ids, not a rejected flag".into()));
                }
                let accepted = req.accepted.clone().ok_or_else(|| ApiError::BadRequest("missing accepted value ids".into()))?;
                if let Some(p) = accepted.iter().find(|p| !values.contains(p)) {
                    return Err(ApiError::BadRequest(format!("value {p} was not asked")));
                }
                let rejected = values.iter().copied().filter(|p| !accepted.contains(p)).collect();
                Ok(UserResponse::Ask { accepted, rejected })
            }
            Action::Rec(items) => {
                let accepted = req.accepted.clone().unwrap_or_default();
                match (accepted.is_empty(), req.rejected) {
                    (false, false) => {
                        if let Some(v) = accepted.iter().find(|v| !items.contains(v)) {
                            return Err(ApiError::BadRequest(format!("item {v} was not recommended")));
                        }
                        Ok(UserResponse::Rec { hit: true })
                    }
                    (true, true) => Ok(UserResponse::Rec { hit: false }),
                    _ => Err(ApiError::BadRequest("recommendations take accepted item ids or rejected = true".into())),
                }
            }
        }
    }
}

async fn create_session(State(app): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> Result<Json<SessionView>, ApiError> {
    app.expire(Instant::now());
    let catalog = app.registry.catalogs.get(&req.catalog_id).cloned().ok_or_else(|| ApiError::NotFound(format!("unknown catalog {}", req.catalog_id)))?;
    let model = app.registry.models.get(&req.checkpoint_id).cloned().ok_or_else(|| ApiError::NotFound(format!("unknown checkpoint {}", req.checkpoint_id)))?;
    if model.catalog_id != req.catalog_id {
        return Err(ApiError::BadRequest(format!("checkpoint {} belongs to catalog {}", req.checkpoint_id, model.catalog_id)));
    }
    let targets = match (&req.targets, req.user) {
        (Some(t), None) => t.clone(),
        (None, Some(u)) if u < catalog.n_users() => catalog.user_items(u).to_vec(),
        (None, Some(u)) => return Err(ApiError::BadRequest(format!("unknown user {u}"))),
        (None, None) => Vec::new(),
        (Some(_), Some(_)) => return Err(ApiError::BadRequest("give targets or user, not both".into())),
    };
    if let Some(v) = targets.iter().find(|&&v| v >= catalog.n_items()) {
        return Err(ApiError::BadRequest(format!("unknown item {v}")));
    }
    if req.simulated && targets.is_empty() {
        return Err(ApiError::BadRequest("simulated sessions need targets".into()));
    }
    let env = Env::new(&catalog, &app.episode);
    let state = match req.seed_value {
        Some(p) => {
            if p >= catalog.n_values() {
                return Err(ApiError::BadRequest(format!("unknown seed value {p}")));
            }
            if targets.iter().any(|&v| !catalog.item_has_value(v, p)) {
                return Err(ApiError::BadRequest(format!("seed value {p} is not carried by every target")));
            }
            env.init_with_seed(req.user.unwrap_or(0), p)
        }
        None => env.init_session(req.user.unwrap_or(0), &targets, &mut ChaCha8Rng::seed_from_u64(req.seed)).map_err(|e| ApiError::BadRequest(e.to_string()))?,
    };
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed));
    let mut session = Session {
        id: id.clone(),
        catalog,
        catalog_id: req.catalog_id,
        model_id: req.checkpoint_id,
        model,
        simulated: req.simulated,
        targets,
        transcript: vec![TraceRecord::seed(&state)],
        state,
        pending: None,
        diagnostics: None,
        last_reward: 0.0,
        total_reward: 0.0,
        touched: Instant::now(),
    };
    session.act(&app.episode)?;
    let view = session.view();
    app.sessions.lock().unwrap().insert(id, Arc::new(Mutex::new(session)));
    Ok(Json(view))
}

async fn respond(State(app): State<Arc<AppState>>, Path(id): Path<String>, Json(req): Json<RespondRequest>) -> Result<Json<SessionView>, ApiError> {
    let handle = app.session(&id)?;
    let mut s = handle.lock().unwrap();
    s.touched = Instant::now();
    let action = s.pending.clone().ok_or_else(|| ApiError::Conflict(format!("session {id} has ended")))?;
    let response = if s.simulated && req.accepted.is_none() && !req.rejected {
        Env::new(&s.catalog, &app.episode).simulate_user(&action, &s.targets)
    } else {
        s.response_for(&action, &req)?
    };
    let step = Env::new(&s.catalog, &app.episode).apply(&s.state, &action, response).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    s.transcript.push(TraceRecord::step(&action, &step.response, &step.next, step.reward));
    s.last_reward = step.reward;
    s.total_reward += step.reward;
    s.state = step.next;
    s.act(&app.episode)?;
    Ok(Json(s.view()))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let handle = app.session(&id)?;
    let mut s = handle.lock().unwrap();
    s.touched = Instant::now();
    Ok(Json(s.view()))
}

async fn get_trace(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<String, ApiError> {
    let handle = app.session(&id)?;
    let s = handle.lock().unwrap();
    Ok(trace_to_jsonl(&s.transcript))
}

async fn list_catalogs(State(app): State<Arc<AppState>>) -> Json<Vec<CatalogInfo>> {
    let infos = app
        .registry
        .catalogs
        .iter()
        .map(|(id, c)| CatalogInfo {
            id: id.clone(),
            fingerprint: c.fingerprint(),
            n_users: c.n_users(),
            n_items: c.n_items(),
            types: (0..c.n_types())
                .map(|y| TypeInfo {
                    id: y,
                    name: c.type_name(y).to_string(),
                    single_valued: c.is_single_valued(y),
                    values: c.values_of_type(y).into_iter().map(|p| (p, c.value_name(p).to_string())).collect(),
                })
                .collect(),
        })
        .collect();
    Json(infos)
}

async fn list_checkpoints(State(app): State<Arc<AppState>>) -> Json<Vec<CheckpointInfo>> {
    Json(app.registry.models.iter().map(|(id, m)| CheckpointInfo { id: id.clone(), catalog_id: m.catalog_id.clone(), manifest: m.manifest.clone() }).collect())
}

/// Builds the API router, serving `ui` as static assets when given.
pub fn router(app: Arc<AppState>, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/response", post(respond))
        .route("/sessions/{id}/trace", get(get_trace))
        .route("/catalogs", get(list_catalogs))
        .route("/checkpoints", get(list_checkpoints))
        .with_state(app);
    match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves on a bound listener until the process is stopped, sweeping idle
/// sessions once a minute.
pub async fn serve(app: Arc<AppState>, listener: tokio::net::TcpListener, ui: Option<PathBuf>) -> std::io::Result<()> {
    let sweeper = app.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let gone = sweeper.expire(Instant::now());
            if gone > 0 {
                tracing::info!(expired = gone, "idle sessions dropped");
            }
        }
    });
    axum::serve(listener, router(app, ui)).await
}
