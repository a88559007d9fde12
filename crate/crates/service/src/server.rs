//! HTTP API for adjudication and the annotation workflow.
//!
//! Every JSON body in either direction carries `api_version`. Errors use
//! the body from [`ServiceError::body`] with the status from its code.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use precedent_core::adjudication::AdjudicationEpisode;

use crate::annotation::{canonical_actions, canonical_labels, AnnotationStore, AnnotationSubmission};
use crate::error::{ErrorCode, ServiceError};
use crate::runtime::{AdjudicationRequest, EpisodeSummary, Runtime, SceneInput};
use crate::API_VERSION;

pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(60);

#[derive(Debug, Clone)]
enum Job {
    Pending,
    Done(String),
    Failed(ServiceError),
}

pub struct AppState {
    runtime: Runtime,
    annotations: Option<AnnotationStore>,
    episodes: RwLock<HashMap<String, AdjudicationEpisode>>,
    jobs: Mutex<HashMap<String, Job>>,
    next_job: AtomicU64,
    episodes_dir: Option<PathBuf>,
    deadline: Duration,
}

impl AppState {
    pub fn new(runtime: Runtime) -> Self {
        AppState {
            runtime,
            annotations: None,
            episodes: RwLock::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
            next_job: AtomicU64::new(1),
            episodes_dir: None,
            deadline: DEFAULT_DEADLINE,
        }
    }

    pub fn with_annotations(mut self, store: AnnotationStore) -> Self {
        self.annotations = Some(store);
        self
    }

    /// Also write each episode to `dir` and serve episodes found there.
    pub fn with_episodes_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.episodes_dir = Some(dir.into());
        self
    }

    /// How long a request waits for an adjudication before answering with a
    /// poll ticket.
    pub fn with_deadline(mut self, deadline: Duration) -> Self {
        self.deadline = deadline;
        self
    }

    fn annotations(&self) -> Result<&AnnotationStore, ServiceError> {
        self.annotations
            .as_ref()
            .ok_or_else(|| ServiceError::new(ErrorCode::Config, "no annotation task pool is configured"))
    }

    fn store_episode(&self, ep: AdjudicationEpisode) -> Result<(), ServiceError> {
        if let Some(dir) = &self.episodes_dir {
            ep.save(&dir.join(format!("{}.json", ep.episode_id)))?;
        }
        self.episodes.write().expect("episode lock").insert(ep.episode_id.clone(), ep);
        Ok(())
    }

    fn episode(&self, id: &str) -> Option<AdjudicationEpisode> {
        if let Some(ep) = self.episodes.read().expect("episode lock").get(id) {
            return Some(ep.clone());
        }
        let dir = self.episodes_dir.as_ref()?;
        if !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return None;
        }
        AdjudicationEpisode::load(&dir.join(format!("{id}.json"))).ok()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/actions", get(actions))
        .route("/api/tasks/next", get(next_task))
        .route("/api/annotations", post(submit_annotation))
        .route("/api/adjudicate", post(adjudicate))
        .route("/api/episodes/{id}", get(episode))
        .route("/media/{task_id}", get(media))
        .fallback(|| async { ServiceError::new(ErrorCode::NotFound, "no such route") })
        .with_state(state)
}

fn versioned(mut body: Value) -> Json<Value> {
    body["api_version"] = json!(API_VERSION);
    Json(body)
}

/// Parses a request body, insisting on a matching `api_version`.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ServiceError> {
    let mut value: Value =
        serde_json::from_slice(bytes).map_err(|e| ServiceError::invalid(format!("request body is not JSON: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| ServiceError::invalid("request body must be a JSON object"))?;
    match obj.remove("api_version") {
        Some(Value::String(v)) if v == API_VERSION => {}
        Some(other) => {
            return Err(ServiceError::new(
                ErrorCode::UnsupportedVersion,
                format!("api_version {other} is not supported, expected \"{API_VERSION}\""),
            ))
        }
        None => return Err(ServiceError::invalid("api_version is required")),
    }
    serde_json::from_value(value).map_err(|e| ServiceError::invalid(e.to_string()))
}

async fn actions() -> Json<Value> {
    versioned(json!({"actions": canonical_actions(), "labels": canonical_labels()}))
}

async fn next_task(
    State(state): State<Arc<AppState>>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Json<Value>, ServiceError> {
    let annotator = params
        .get("annotator")
        .ok_or_else(|| ServiceError::invalid("the annotator query parameter is required"))?;
    let task = state.annotations()?.next_task(annotator)?;
    Ok(versioned(json!({ "task": task })))
}

async fn submit_annotation(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ServiceError> {
    let submission: AnnotationSubmission = parse_body(&body)?;
    let records = tokio::task::spawn_blocking(move || state.annotations()?.submit(&submission))
        .await
        .map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))??;
    Ok(versioned(json!({ "records": records })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdjudicateBody {
    engine: String,
    scene: SceneInput,
    action: String,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    max_iterations: Option<usize>,
}

async fn adjudicate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ServiceError> {
    let body: AdjudicateBody = parse_body(&body)?;
    let req = AdjudicationRequest {
        engine: body.engine,
        scene: body.scene,
        action: body.action,
        k: body.k,
        max_iterations: body.max_iterations,
    };
    // Shape errors are answered right away rather than through a ticket.
    req.resolve()?;

    let ticket = format!("job-{}", state.next_job.fetch_add(1, Ordering::Relaxed));
    state.jobs.lock().expect("job lock").insert(ticket.clone(), Job::Pending);
    let worker_state = state.clone();
    let worker_ticket = ticket.clone();
    let mut handle = tokio::task::spawn_blocking(move || {
        let result = worker_state
            .runtime
            .adjudicate(&req)
            .and_then(|ep| {
                let summary = EpisodeSummary::of(&ep);
                worker_state.store_episode(ep)?;
                Ok(summary)
            });
        let job = match &result {
            Ok(s) => Job::Done(s.episode_id.clone()),
            Err(e) => Job::Failed(e.clone()),
        };
        worker_state.jobs.lock().expect("job lock").insert(worker_ticket, job);
        result
    });

    match tokio::time::timeout(state.deadline, &mut handle).await {
        Ok(joined) => {
            state.jobs.lock().expect("job lock").remove(&ticket);
            let summary = joined.map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))??;
            let body = serde_json::to_value(summary).map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
            Ok(versioned(body).into_response())
        }
        Err(_) => {
            tracing::info!(%ticket, "adjudication exceeded the deadline, answering with a ticket");
            let body = versioned(json!({
                "status": "pending",
                "ticket": ticket,
                "poll": format!("/api/episodes/{ticket}"),
            }));
            Ok((StatusCode::ACCEPTED, body).into_response())
        }
    }
}

/// Serves a stored episode, or the state of a pending ticket.
async fn episode(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let job = state.jobs.lock().expect("job lock").get(&id).cloned();
    let episode_id = match job {
        Some(Job::Pending) => {
            let body = versioned(json!({"status": "pending", "ticket": id}));
            return Ok((StatusCode::ACCEPTED, body).into_response());
        }
        Some(Job::Failed(e)) => return Err(e),
        Some(Job::Done(episode_id)) => episode_id,
        None => id,
    };
    let ep = state
        .episode(&episode_id)
        .ok_or_else(|| ServiceError::new(ErrorCode::NotFound, format!("no episode '{episode_id}'")))?;
    Ok(versioned(json!({"status": "complete", "episode": ep})).into_response())
}

fn content_type(path: &std::path::Path) -> &'static str {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn media(State(state): State<Arc<AppState>>, Path(task_id): Path<String>) -> Result<Response, ServiceError> {
    let path = state.annotations()?.media_path(&task_id)?;
    let bytes = tokio::fs::read(&path).await?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

/// Binds and serves until interrupted.
pub async fn serve(state: Arc<AppState>, port: u16) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
