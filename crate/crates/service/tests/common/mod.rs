#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use precedent_core::embedding::{EmbeddingProviderConfig, HashEmbedder};
use precedent_core::graph::read_corpus;
use precedent_core::prompts::PromptTemplates;
use precedent_core::{ChatProvider, PrecedentIndex, TypeWeights};
use precedent_service::annotation::{AnnotationStore, TaskRecord};
use precedent_service::runtime::{self, Runtime};
use precedent_service::server::{router, AppState};

pub fn core_fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(rel)
}

/// The frozen ten-record corpus, indexed with the 64-dim test embedder.
pub fn fixture_index() -> PrecedentIndex {
    let graphs = read_corpus(&core_fixture("golden/corpus.jsonl")).unwrap();
    let cfg = EmbeddingProviderConfig::deterministic(64);
    PrecedentIndex::build(graphs, TypeWeights::uniform(), &cfg, &HashEmbedder::new(64).unwrap()).unwrap()
}

pub fn empty_index() -> PrecedentIndex {
    let cfg = EmbeddingProviderConfig::deterministic(64);
    PrecedentIndex::build(vec![], TypeWeights::uniform(), &cfg, &HashEmbedder::new(64).unwrap()).unwrap()
}

pub fn runtime(chat: Arc<dyn ChatProvider>, index: Option<PrecedentIndex>) -> Runtime {
    Runtime::new(chat, runtime::extraction(false).unwrap(), index, PromptTemplates::default()).unwrap()
}

pub fn task(id: &str, image: Option<&str>) -> TaskRecord {
    serde_json::from_value(json!({
        "task_id": id,
        "description": format!("The ego vehicle approaches intersection {id}."),
        "image_ref": image,
        "metadata": {"agent_types": ["VEHICLE"], "relative_positions": ["FRONT"], "map_note": "Signalized intersection."}
    }))
    .unwrap()
}

pub fn app(state: AppState) -> Router {
    router(Arc::new(state))
}

pub fn app_with_tasks(dir: &Path, tasks: Vec<TaskRecord>) -> Router {
    let store = AnnotationStore::open(tasks, dir.join("annotations.jsonl"))
        .unwrap()
        .with_media_root(dir);
    let chat: Arc<dyn ChatProvider> = Arc::new(precedent_core::llm::ScriptedChat::new(Vec::<String>::new()));
    app(AppState::new(runtime(chat, None)).with_annotations(store))
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = send_raw(app, method, uri, body.map(|b| b.to_string())).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, value)
}

pub async fn send_raw(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub fn all_labels(label: &str) -> Value {
    let actions = precedent_service::annotation::canonical_actions();
    Value::Object(actions.into_iter().map(|a| (a, json!(label))).collect())
}

pub fn submission(task_id: &str, annotator: &str, labels: Value) -> Value {
    json!({"api_version": "1", "task_id": task_id, "annotator_id": annotator, "labels": labels})
}

pub fn scene() -> Value {
    json!({
        "description": "The ego vehicle is driving straight on an urban road with a car parked on the right.",
        "metadata": {"agent_types": ["VEHICLE"], "relative_positions": ["RIGHT"], "map_note": "No intersections nearby."}
    })
}
