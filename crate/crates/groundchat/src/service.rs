//! HTTP routes over [`Engine`] and [`SessionStore`].
//!
//! Requests for different sessions run concurrently. Requests for one
//! session queue on that session's lock, so a transcript is never touched
//! by two requests at once.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use tower_http::services::ServeDir;

use crate::api::{
    CreateSession, EditPersona, EditSummary, GroundingView, PostMessage, Reply, Regenerate, SessionView, SEED_HEADER,
};
use crate::error::ServiceError;
use crate::session::{session_view, Engine};
use crate::store::SessionStore;

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    store: Arc<SessionStore>,
    locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

impl AppState {
    pub fn new(engine: Engine, store: SessionStore) -> Self {
        Self {
            engine: Arc::new(engine),
            store: Arc::new(store),
            locks: Arc::default(),
        }
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    /// Runs `f` on a blocking thread while holding the lock of session `id`.
    async fn exclusive<T, F>(&self, id: String, f: F) -> Result<T, ServiceError>
    where
        T: Send + 'static,
        F: FnOnce(&Engine, &SessionStore, &str) -> Result<T, ServiceError> + Send + 'static,
    {
        let lock = self.lock_for(&id);
        let _guard = lock.lock().await;
        let engine = self.engine.clone();
        let store = self.store.clone();
        tokio::task::spawn_blocking(move || f(&engine, &store, &id))
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?
    }
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/message", post(post_message))
        .route("/sessions/{id}/persona", put(edit_persona))
        .route("/sessions/{id}/regenerate", post(regenerate))
        .route("/sessions/{id}/grounding", get(grounding))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

fn header_seed(headers: &HeaderMap) -> Result<Option<u64>, ServiceError> {
    let Some(v) = headers.get(SEED_HEADER) else {
        return Ok(None);
    };
    v.to_str()
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .map(Some)
        .ok_or_else(|| ServiceError::Validation(format!("{SEED_HEADER} must be an unsigned integer")))
}

fn new_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

async fn create_session(
    State(state): State<AppState>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionView>), ServiceError> {
    let view = state
        .exclusive(new_id(), move |engine, store, id| {
            let session = engine.create(id, &req.persona, req.expand)?;
            store.put(&session)?;
            Ok(session_view(&session))
        })
        .await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ServiceError> {
    let view = state
        .exclusive(id, |_, store, id| Ok(session_view(&store.load(id)?)))
        .await?;
    Ok(Json(view))
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<PostMessage>,
) -> Result<Json<Reply>, ServiceError> {
    let seed = match req.seed {
        Some(s) => Some(s),
        None => header_seed(&headers)?,
    };
    let reply = state
        .exclusive(id, move |engine, store, id| {
            let mut session = store.load(id)?;
            let reply = engine.post_message(&mut session, &req.text, seed)?;
            store.put(&session)?;
            Ok(reply)
        })
        .await?;
    Ok(Json(reply))
}

async fn edit_persona(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<EditPersona>,
) -> Result<Json<EditSummary>, ServiceError> {
    let summary = state
        .exclusive(id, move |engine, store, id| {
            let mut session = store.load(id)?;
            let summary = engine.edit(&mut session, &req.ops)?;
            store.put(&session)?;
            Ok(summary)
        })
        .await?;
    Ok(Json(summary))
}

async fn regenerate(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Option<Json<Regenerate>>,
) -> Result<Json<Reply>, ServiceError> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let seed = match req.seed {
        Some(s) => Some(s),
        None => header_seed(&headers)?,
    };
    let reply = state
        .exclusive(id, move |engine, store, id| {
            let mut session = store.load(id)?;
            let reply = engine.regenerate(&mut session, req.forced_index, seed, !req.dry_run)?;
            if !req.dry_run {
                store.put(&session)?;
            }
            Ok(reply)
        })
        .await?;
    Ok(Json(reply))
}

async fn grounding(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<GroundingView>, ServiceError> {
    let view = state
        .exclusive(id, |engine, store, id| Ok(engine.grounding(&store.load(id)?)))
        .await?;
    Ok(Json(view))
}
