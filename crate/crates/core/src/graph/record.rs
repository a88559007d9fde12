//! Line-oriented corpus records.
//!
//! One graph per line, UTF-8 JSON, tagged with `schema_version`. Embeddings
//! are written inline as arrays and round-trip bit-exactly.

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::{validate_graph, GraphError, SceneActionGraph};
use crate::fsutil::atomic_write;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Serialize)]
struct RecordOut<'a> {
    schema_version: &'static str,
    #[serde(flatten)]
    graph: &'a SceneActionGraph,
}

/// Renders a valid graph as a single-line record (no trailing newline).
pub fn serialize_graph(graph: &SceneActionGraph) -> Result<String, GraphError> {
    let violations = validate_graph(graph);
    if !violations.is_empty() {
        return Err(GraphError::Invalid {
            graph_id: graph.graph_id.clone(),
            violations,
        });
    }
    let record = RecordOut {
        schema_version: SCHEMA_VERSION,
        graph,
    };
    serde_json::to_string(&record).map_err(|e| GraphError::Schema {
        path: String::new(),
        message: e.to_string(),
    })
}

/// Parses one record. Structural problems are reported with the JSON path of
/// the offending field.
pub fn deserialize_graph(record: &str) -> Result<SceneActionGraph, GraphError> {
    let mut value: Value = serde_json::from_str(record).map_err(|e| GraphError::Schema {
        path: String::new(),
        message: e.to_string(),
    })?;
    let object = value.as_object_mut().ok_or_else(|| GraphError::Schema {
        path: String::new(),
        message: "record must be a JSON object".into(),
    })?;
    match object.remove("schema_version") {
        Some(Value::String(v)) if v == SCHEMA_VERSION => {}
        Some(Value::String(v)) => {
            return Err(GraphError::Version {
                found: v,
                expected: SCHEMA_VERSION,
            })
        }
        Some(other) => {
            return Err(GraphError::Version {
                found: other.to_string(),
                expected: SCHEMA_VERSION,
            })
        }
        None => {
            return Err(GraphError::Schema {
                path: "schema_version".into(),
                message: "missing field".into(),
            })
        }
    }
    serde_path_to_error::deserialize(value).map_err(|e| GraphError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Reads a corpus file, rejecting malformed lines and duplicate graph ids.
/// A missing file is an empty corpus.
pub fn read_corpus(path: &Path) -> Result<Vec<SceneActionGraph>, GraphError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut seen = HashSet::new();
    let mut graphs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let graph = deserialize_graph(line).map_err(|e| GraphError::Line {
            line: i + 1,
            source: Box::new(e),
        })?;
        if !seen.insert(graph.graph_id.clone()) {
            return Err(GraphError::DuplicateGraphId(graph.graph_id));
        }
        graphs.push(graph);
    }
    Ok(graphs)
}

/// Atomically replaces the corpus at `path` with `graphs`.
pub fn write_corpus(path: &Path, graphs: &[SceneActionGraph]) -> Result<(), GraphError> {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&serialize_graph(g)?);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}
