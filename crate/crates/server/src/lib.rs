//! HTTP session server for human participants: creates sessions from a
//! task, serves trials without outcomes, records choices and exports
//! choice logs in the same format the simulator writes.

pub mod error;
pub mod model;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use repscope::choice::{format_timestamp, ChoiceRecord, SessionStatus};
use repscope::embedding::EmbeddingMatrix;
use repscope::simulator::RESPONSE_KEYS;
use repscope::task::{generate_task_with, ImageManifest, TaskKind, TaskSpec, STIMULI_PER_TASK};
use serde::de::DeserializeOwned;

pub use error::{ApiError, ApiResult};
use model::*;
use store::{valid_session_id, SessionLog, Store};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    /// Needed for sessions that ask the server to generate their task.
    pub embedding: Option<EmbeddingMatrix>,
    pub manifest: Option<ImageManifest>,
    /// Relative image paths in the manifest resolve against this.
    pub manifest_root: PathBuf,
    pub bonus: BonusFormula,
    pub comprehension: ComprehensionCheck,
    pub require_comprehension: bool,
    pub fsync: bool,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            embedding: None,
            manifest: None,
            manifest_root: PathBuf::from("."),
            bonus: BonusFormula::default(),
            comprehension: ComprehensionCheck::default(),
            require_comprehension: true,
            fsync: true,
        }
    }
}

struct Entry {
    session: Session,
    log: SessionLog,
}

struct Inner {
    config: ServerConfig,
    store: Store,
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
}

/// Shared server state. Each session has its own lock, so sessions never
/// contend with each other and a session's writes are serialized.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Open the data directory and replay every persisted session.
    pub fn open(config: ServerConfig) -> std::io::Result<Self> {
        let (store, loaded) = Store::open(&config.data_dir, config.fsync)?;
        log::info!("loaded {} sessions from {}", loaded.len(), config.data_dir.display());
        let sessions = loaded
            .into_iter()
            .map(|(session, log)| (session.session_id.clone(), Arc::new(Mutex::new(Entry { session, log }))))
            .collect();
        Ok(Self(Arc::new(Inner {
            config,
            store,
            sessions: RwLock::new(sessions),
        })))
    }

    pub fn config(&self) -> &ServerConfig {
        &self.0.config
    }

    fn entry(&self, id: &str) -> ApiResult<Arc<Mutex<Entry>>> {
        let map = self.0.sessions.read().unwrap_or_else(|p| p.into_inner());
        map.get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session '{id}'")))
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Entry) -> ApiResult<T>) -> ApiResult<T> {
        let entry = self.entry(id)?;
        let mut guard = entry.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/trials/{t}", get(get_trial))
        .route("/sessions/{id}/choices", post(submit_choice))
        .route("/sessions/{id}/comprehension", post(comprehension))
        .route("/sessions/{id}/consent", post(consent))
        .route("/sessions/{id}/abandon", post(abandon))
        .route("/sessions/{id}/export", get(export))
        .route("/stimuli/{id}", get(stimulus))
        .fallback(|| async { ApiError::NotFound("no such route".into()) })
        .method_not_allowed_fallback(|| async {
            (
                StatusCode::METHOD_NOT_ALLOWED,
                Json(error::ErrorBody {
                    code: "method_not_allowed",
                    message: "method not allowed for this route".into(),
                    detail: serde_json::Value::Null,
                }),
            )
        })
        .with_state(state)
}

/// Bind `addr` and serve until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

fn now() -> String {
    format_timestamp(Utc::now())
}

fn encode_path_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn build_task(config: &ServerConfig, req: &CreateSession) -> ApiResult<TaskSpec> {
    let mut task = match (&req.task, &req.generate) {
        (Some(task), None) => {
            task.validate()?;
            task.clone()
        }
        (None, Some(g)) => {
            let embedding = config
                .embedding
                .as_ref()
                .ok_or_else(|| ApiError::BadRequest("the server has no embedding loaded for task generation".into()))?;
            if embedding.feature_index(&g.feature).is_none() {
                return Err(ApiError::BadRequest(format!("unknown feature '{}'", g.feature)));
            }
            let seed = g.seed.unwrap_or_else(|| uuid::Uuid::new_v4().as_u64_pair().0);
            generate_task_with(embedding, &g.feature, g.kind, seed, g.n_stimuli.unwrap_or(STIMULI_PER_TASK))?
        }
        _ => return Err(ApiError::BadRequest("give exactly one of 'task' and 'generate'".into())),
    };
    if let Some(manifest) = &config.manifest {
        for trial in &mut task.trials {
            manifest.attach(&mut trial.stimuli)?;
        }
    }
    Ok(task)
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = parse_body(&body)?;
    if req.participant_id.trim().is_empty() || req.participant_id.len() > 256 {
        return Err(ApiError::BadRequest("participant_id must be 1-256 characters".into()));
    }
    let session_id = match &req.session_id {
        Some(id) if !valid_session_id(id) => {
            return Err(ApiError::BadRequest(
                "session_id must be 1-64 characters of [A-Za-z0-9_-]".into(),
            ))
        }
        Some(id) => id.clone(),
        None => uuid::Uuid::new_v4().simple().to_string(),
    };
    let task = build_task(state.config(), &req)?;
    let created = Event::Created {
        session_id: session_id.clone(),
        participant_id: req.participant_id.clone(),
        task,
        at: now(),
    };
    let session = Session::from_created(&created).ok_or_else(|| ApiError::Internal("bad creation event".into()))?;

    let mut map = state.0.sessions.write().unwrap_or_else(|p| p.into_inner());
    if map.contains_key(&session_id) {
        return Err(ApiError::Conflict(format!("session '{session_id}' already exists")));
    }
    let log = state.0.store.create(&created, &session).map_err(|e| match e.kind() {
        std::io::ErrorKind::AlreadyExists => ApiError::Conflict(format!("session '{session_id}' already exists")),
        _ => ApiError::Storage(e),
    })?;
    let view = session.view(&state.config().bonus);
    map.insert(session_id, Arc::new(Mutex::new(Entry { session, log })));
    log::info!("created session {} ({} trials)", view.session_id, view.n_trials);
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let bonus = state.config().bonus;
    state.with_session(&id, |e| Ok(Json(e.session.view(&bonus))))
}

fn ensure_playable(session: &Session, config: &ServerConfig) -> ApiResult<()> {
    match session.status {
        SessionStatus::Active => {}
        SessionStatus::Completed => return Err(ApiError::Gone("session is completed".into())),
        SessionStatus::Abandoned => return Err(ApiError::Gone("session was abandoned".into())),
    }
    if config.require_comprehension && !session.comprehension_passed {
        return Err(ApiError::ComprehensionRequired(
            "the comprehension check must be passed first".into(),
        ));
    }
    Ok(())
}

async fn get_trial(
    State(state): State<AppState>,
    UrlPath((id, t)): UrlPath<(String, String)>,
) -> ApiResult<Json<TrialPayload>> {
    let t: usize = t
        .parse()
        .map_err(|_| ApiError::BadRequest(format!("trial index '{t}' is not a non-negative integer")))?;
    let config = state.config().clone();
    state.with_session(&id, |e| {
        let s = &e.session;
        ensure_playable(s, &config)?;
        if t != s.current_trial() {
            return Err(ApiError::Protocol {
                message: format!("trial {t} requested but the session is at trial {}", s.current_trial()),
                current_trial: s.current_trial(),
            });
        }
        let trial = &s.task.trials[t];
        Ok(Json(TrialPayload {
            session_id: s.session_id.clone(),
            kind: s.task.kind,
            trial: t,
            n_trials: s.n_trials(),
            stimuli: trial
                .stimuli
                .iter()
                .enumerate()
                .map(|(position, d)| StimulusPayload {
                    position,
                    stimulus_id: d.stimulus_id.clone(),
                    image_url: d
                        .image_ref
                        .as_ref()
                        .map(|r| format!("/stimuli/{}", encode_path_segment(r))),
                })
                .collect(),
            response_keys: RESPONSE_KEYS,
            bonus: config.bonus.evaluate(&s.records),
        }))
    })
}

async fn submit_choice(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<Feedback>> {
    let req: SubmitChoice = parse_body(&body)?;
    let config = state.config().clone();
    state.with_session(&id, |e| {
        let current = e.session.current_trial();
        if req.trial < current {
            return Ok(Json(e.session.feedback[req.trial].clone()));
        }
        ensure_playable(&e.session, &config)?;
        if req.trial > current {
            return Err(ApiError::Protocol {
                message: format!("choice for trial {} but the session is at trial {current}", req.trial),
                current_trial: current,
            });
        }
        if !req.response_time_ms.is_finite() || req.response_time_ms < 0.0 {
            return Err(ApiError::Validation("response_time_ms must be finite and non-negative".into()));
        }
        let key = match &req.response_key {
            Some(k) => k.clone(),
            None => RESPONSE_KEYS.get(req.choice).map(|k| k.to_string()).unwrap_or_default(),
        };
        let task = &e.session.task;
        let record = ChoiceRecord::from_task(task, req.trial, req.choice, &key, req.response_time_ms, now())?;
        let next = req.trial + 1;
        let bonus = {
            let mut all = e.session.records.clone();
            all.push(record.clone());
            config.bonus.evaluate(&all)
        };
        let (rewards, feedback_ms, iti_ms) = match task.kind {
            TaskKind::Category => (None, CATEGORY_FEEDBACK_MS, None),
            TaskKind::Reward => (
                Some(task.trials[req.trial].reward_values()?.to_vec()),
                REWARD_FEEDBACK_MS,
                Some(REWARD_ITI_MS),
            ),
        };
        let feedback = Feedback {
            trial: req.trial,
            choice: req.choice,
            correct: record.correct,
            rewards,
            reward: record.reward,
            feedback_ms,
            iti_ms,
            bonus,
            next_trial: (next < e.session.n_trials()).then_some(next),
            completed: next == e.session.n_trials(),
        };
        let event = Event::Choice {
            record,
            feedback: feedback.clone(),
        };
        e.log.append(&event)?;
        e.session.apply(event);
        Ok(Json(feedback))
    })
}

async fn comprehension(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<ComprehensionResult>> {
    let req: ComprehensionAnswers = parse_body(&body)?;
    let check = state.config().comprehension.clone();
    state.with_session(&id, |e| {
        if e.session.status != SessionStatus::Active {
            return Err(ApiError::Gone("session is no longer active".into()));
        }
        let result = check.grade(&req.answers);
        if result.passed && !e.session.comprehension_passed {
            let event = Event::Comprehension { at: now() };
            e.log.append(&event)?;
            e.session.apply(event);
        }
        Ok(Json(result))
    })
}

async fn consent(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let req: Consent = parse_body(&body)?;
    let bonus = state.config().bonus;
    state.with_session(&id, |e| {
        let event = Event::Consent {
            use_data: req.use_data,
            at: now(),
        };
        e.log.append(&event)?;
        e.session.apply(event);
        Ok(Json(e.session.view(&bonus)))
    })
}

async fn abandon(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let bonus = state.config().bonus;
    state.with_session(&id, |e| {
        match e.session.status {
            SessionStatus::Completed => return Err(ApiError::Conflict("session is already completed".into())),
            SessionStatus::Abandoned => {}
            SessionStatus::Active => {
                let event = Event::Abandoned { at: now() };
                e.log.append(&event)?;
                e.session.apply(event);
            }
        }
        Ok(Json(e.session.view(&bonus)))
    })
}

async fn export(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let body = state.with_session(&id, |e| Ok(e.session.export().to_json()?))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("svg") => "image/svg+xml",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

async fn stimulus(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let config = state.config();
    let target = config
        .manifest
        .as_ref()
        .and_then(|m| m.get(&id))
        .ok_or_else(|| ApiError::NotFound(format!("no image for stimulus '{id}'")))?;
    if target.starts_with("http://") || target.starts_with("https://") {
        return Ok((StatusCode::TEMPORARY_REDIRECT, [(header::LOCATION, target.to_string())]).into_response());
    }
    let path = config.manifest_root.join(target);
    let bytes = tokio::fs::read(&path).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ApiError::NotFound(format!("image file for stimulus '{id}' is missing")),
        _ => ApiError::Storage(e),
    })?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], Body::from(bytes)).into_response())
}
