//! HTTP session service. A session is multi-turn: the engine's clue and
//! entity-fact requests are returned to the client, which answers through
//! `POST /sessions/{id}/facts`. One session mutates the engine at a time.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cilk_core::checkpoint::{save_engine, KB_FILE};
use cilk_core::decision::Verdict;
use cilk_core::kb::Fact;
use cilk_core::session::{Candidate, Engine, Event, Query, Session, SessionError, SessionState};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

use crate::commands::append_triples;
use crate::config::BusyPolicy;

pub const API_VERSION: u32 = 1;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(id: u64) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"v": API_VERSION, "error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateView {
    NeedClue {
        relation: String,
        max_n: usize,
    },
    NeedEntityFact {
        entity: String,
        max_n: usize,
    },
    Done {
        verdict: Verdict,
        threshold: f64,
        top: Vec<Candidate>,
    },
    Aborted {
        reason: String,
    },
}

fn view_of(state: &SessionState) -> StateView {
    match state {
        SessionState::NeedClue { relation, max_n } => StateView::NeedClue {
            relation: relation.clone(),
            max_n: *max_n,
        },
        SessionState::NeedEntityFact { entity, max_n } => StateView::NeedEntityFact {
            entity: entity.clone(),
            max_n: *max_n,
        },
        SessionState::Done(out) => {
            let top = out
                .transcript
                .iter()
                .rev()
                .find_map(|e| match e {
                    Event::Decided { top, .. } => Some(top.clone()),
                    _ => None,
                })
                .unwrap_or_default();
            StateView::Done {
                verdict: out.verdict.clone(),
                threshold: out.threshold,
                top,
            }
        }
    }
}

struct Slot {
    session: Option<Session>,
    state: StateView,
    permit: Option<OwnedSemaphorePermit>,
}

#[derive(Debug, Default, Clone, Serialize)]
struct Counters {
    sessions_started: u64,
    sessions_completed: u64,
    sessions_aborted: u64,
    facts_accepted: u64,
    verdicts: BTreeMap<String, u64>,
}

pub struct Service {
    engine: Arc<Mutex<Engine>>,
    sessions: Mutex<BTreeMap<u64, Arc<tokio::sync::Mutex<Slot>>>>,
    gate: Arc<Semaphore>,
    busy: BusyPolicy,
    checkpoint: Option<PathBuf>,
    counters: Mutex<Counters>,
    snapshot: Mutex<Snapshot>,
}

/// Read-only views, refreshed after every engine call.
#[derive(Clone)]
struct Snapshot {
    kb_stats: Value,
    buffers: Value,
}

impl Snapshot {
    fn of(engine: &Engine) -> Self {
        let (train, valid) = engine.kb.split_counts();
        Snapshot {
            kb_stats: json!({
                "v": API_VERSION,
                "entities": engine.kb.num_entities(),
                "relations": engine.kb.num_relations(),
                "triples": engine.kb.len(),
                "train": train,
                "valid": valid,
                "relation_names": engine.kb.relations().names(),
                "entity_names": engine.kb.entities().names(),
            }),
            buffers: json!({
                "v": API_VERSION,
                "rho": engine.config.rho,
                "performance": engine.perf,
                "thresholds": engine.thr,
                "diffident": engine.diffident,
            }),
        }
    }
}

impl Service {
    /// `checkpoint`, when set, receives appended facts and a full
    /// checkpoint after every finished session.
    pub fn new(engine: Engine, busy: BusyPolicy, checkpoint: Option<PathBuf>) -> Arc<Self> {
        let snapshot = Mutex::new(Snapshot::of(&engine));
        Arc::new(Service {
            snapshot,
            engine: Arc::new(Mutex::new(engine)),
            sessions: Mutex::new(BTreeMap::new()),
            gate: Arc::new(Semaphore::new(1)),
            busy,
            checkpoint,
            counters: Mutex::new(Counters::default()),
        })
    }

    fn slot(&self, id: u64) -> Result<Arc<tokio::sync::Mutex<Slot>>, ApiError> {
        self.sessions.lock().unwrap().get(&id).cloned().ok_or(ApiError::not_found(id))
    }

    /// Runs `f` on the engine off the async executor, then persists the
    /// triples it added and, if `checkpoint_after` says so, the whole engine.
    async fn with_engine<T: Send + 'static>(
        self: &Arc<Self>,
        f: impl FnOnce(&mut Engine) -> T + Send + 'static,
        checkpoint_after: impl FnOnce(&T) -> bool + Send + 'static,
    ) -> Result<T, ApiError> {
        let this = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            let mut engine = this.engine.lock().unwrap();
            let before = engine.kb.len();
            let out = f(&mut engine);
            if let Some(dir) = &this.checkpoint {
                append_triples(&dir.join(KB_FILE), &engine.kb, before)
                    .map_err(|e| ApiError::internal(format!("persisting facts: {e}")))?;
                if checkpoint_after(&out) {
                    save_engine(dir, &engine).map_err(|e| ApiError::internal(format!("checkpoint: {e}")))?;
                }
            }
            this.counters.lock().unwrap().facts_accepted += (engine.kb.len() - before) as u64;
            *this.snapshot.lock().unwrap() = Snapshot::of(&engine);
            Ok(out)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
    }

    fn record_done(&self, state: &SessionState) {
        if let SessionState::Done(out) = state {
            let mut c = self.counters.lock().unwrap();
            c.sessions_completed += 1;
            *c.verdicts.entry(out.verdict.label().to_owned()).or_default() += 1;
        }
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON: {e}")))?;
    match value.get("v") {
        None => {}
        Some(v) if v.as_u64() == Some(API_VERSION as u64) => {}
        Some(v) => return Err(ApiError::bad_request(format!("unsupported API version {v}"))),
    }
    serde_json::from_value(value).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn check_name(what: &str, s: &str) -> Result<(), ApiError> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(ApiError::bad_request(format!("{what} must be non-empty without tabs or newlines")));
    }
    Ok(())
}

#[derive(Deserialize)]
struct CreateSession {
    #[allow(dead_code)]
    v: Option<u32>,
    query: Query,
}

#[derive(Deserialize)]
struct TripleBody {
    head: String,
    relation: String,
    tail: String,
}

#[derive(Deserialize)]
struct SupplyFacts {
    #[allow(dead_code)]
    v: Option<u32>,
    triples: Vec<TripleBody>,
}

async fn create_session(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    check_name("entity", &req.query.entity)?;
    check_name("relation", &req.query.relation)?;
    let permit = match svc.busy {
        BusyPolicy::Queue => svc.gate.clone().acquire_owned().await.map_err(|e| ApiError::internal(e.to_string()))?,
        BusyPolicy::Reject => svc.gate.clone().try_acquire_owned().map_err(|_| {
            ApiError::new(StatusCode::CONFLICT, "busy", "another session is in progress")
        })?,
    };
    let query = req.query;
    let (session, state) = svc
        .with_engine(move |e| e.begin(query), |(_, s)| matches!(s, SessionState::Done(_)))
        .await?;
    svc.counters.lock().unwrap().sessions_started += 1;
    svc.record_done(&state);
    let id = session.index();
    let view = view_of(&state);
    let done = matches!(state, SessionState::Done(_));
    let slot = Slot {
        session: Some(session),
        state: view.clone(),
        permit: (!done).then_some(permit),
    };
    svc.sessions.lock().unwrap().insert(id, Arc::new(tokio::sync::Mutex::new(slot)));
    let body = json!({"v": API_VERSION, "session_id": id, "state": view});
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn supply_facts(State(svc): State<Arc<Service>>, Path(id): Path<u64>, body: Bytes) -> ApiResult {
    let req: SupplyFacts = parse_body(&body)?;
    for t in &req.triples {
        check_name("head", &t.head)?;
        check_name("relation", &t.relation)?;
        check_name("tail", &t.tail)?;
    }
    let facts: Vec<Fact> = req.triples.into_iter().map(|t| Fact::new(t.head, t.relation, t.tail)).collect();
    let slot = svc.slot(id)?;
    let mut slot = slot.lock().await;
    if matches!(slot.state, StateView::Done { .. } | StateView::Aborted { .. }) {
        return Err(ApiError::new(StatusCode::CONFLICT, "finished", format!("session {id} is finished")));
    }
    let mut session = slot.session.take().ok_or_else(|| ApiError::internal("session state missing"))?;
    let (session, result) = svc
        .with_engine(
            move |e| {
                let r = e.supply(&mut session, facts);
                (session, r)
            },
            |(_, r)| matches!(r, Ok(SessionState::Done(_))),
        )
        .await?;
    slot.session = Some(session);
    let state = result.map_err(|e| match e {
        SessionError::InvalidFacts(m) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_facts", m),
        other => ApiError::new(StatusCode::CONFLICT, "not_waiting", other.to_string()),
    })?;
    svc.record_done(&state);
    slot.state = view_of(&state);
    if matches!(state, SessionState::Done(_)) {
        slot.permit = None;
    }
    Ok(Json(json!({"v": API_VERSION, "session_id": id, "state": slot.state})))
}

async fn abort_session(State(svc): State<Arc<Service>>, Path(id): Path<u64>) -> ApiResult {
    let slot = svc.slot(id)?;
    let mut slot = slot.lock().await;
    if let StateView::NeedClue { .. } | StateView::NeedEntityFact { .. } = slot.state {
        let mut session = slot.session.take().ok_or_else(|| ApiError::internal("session state missing"))?;
        let session = svc
            .with_engine(
                move |e| {
                    e.abort(&mut session, "aborted by client");
                    session
                },
                |_| true,
            )
            .await?;
        slot.session = Some(session);
        slot.state = StateView::Aborted {
            reason: "aborted by client".into(),
        };
        slot.permit = None;
        svc.counters.lock().unwrap().sessions_aborted += 1;
    }
    Ok(Json(json!({"v": API_VERSION, "session_id": id, "state": slot.state})))
}

async fn get_session(State(svc): State<Arc<Service>>, Path(id): Path<u64>) -> ApiResult {
    let slot = svc.slot(id)?;
    let slot = slot.lock().await;
    let session = slot.session.as_ref().ok_or_else(|| ApiError::internal("session state missing"))?;
    Ok(Json(json!({
        "v": API_VERSION,
        "session_id": id,
        "query": session.query(),
        "state": slot.state,
        "transcript": session.transcript(),
    })))
}

async fn kb_stats(State(svc): State<Arc<Service>>) -> Json<Value> {
    Json(svc.snapshot.lock().unwrap().kb_stats.clone())
}

async fn buffers(State(svc): State<Arc<Service>>) -> Json<Value> {
    Json(svc.snapshot.lock().unwrap().buffers.clone())
}

async fn metrics(State(svc): State<Arc<Service>>) -> ApiResult {
    let counters = svc.counters.lock().unwrap().clone();
    let active = svc.gate.available_permits() == 0;
    let mut body = serde_json::to_value(counters).map_err(|e| ApiError::internal(e.to_string()))?;
    body["v"] = json!(API_VERSION);
    body["active_session"] = json!(active);
    Ok(Json(body))
}

async fn health() -> Json<Value> {
    Json(json!({"v": API_VERSION, "status": "ok"}))
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(abort_session))
        .route("/sessions/{id}/facts", post(supply_facts))
        .route("/kb/stats", get(kb_stats))
        .route("/buffers", get(buffers))
        .route("/metrics", get(metrics))
        .route("/health", get(health))
        .with_state(svc)
}

pub async fn serve(svc: Arc<Service>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
