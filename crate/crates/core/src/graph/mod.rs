//! Scene-action graph model shared by every other module.
//!
//! A graph summarizes one driving scene: the map context, the ego vehicle,
//! what the ego did, the surrounding obstacles and what they did, and (for
//! crash-derived graphs) how it ended. Each node carries a natural-language
//! description and, once embedded, a unit-norm vector.

mod record;
mod vocab;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingVector, NORM_TOLERANCE};

pub use record::{deserialize_graph, read_corpus, serialize_graph, write_corpus, SCHEMA_VERSION};
pub use vocab::{parse_action, parse_outcome_label, DrivingAction, OutcomeLabel};


/// Marker prefixes an outcome description must start with.
pub const COLLISION_MARKER: &str = "COLLISION";
pub const NO_COLLISION_MARKER: &str = "NO COLLISION";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node type '{0}'")]
    UnknownNodeType(String),
    #[error("action text is empty")]
    EmptyAction,
    #[error("no UNSAFE/SAFE/REASONABLE token in engine response: {excerpt:?}")]
    UnparseableLabel { excerpt: String },
    #[error("schema error at '{path}': {message}")]
    Schema { path: String, message: String },
    #[error("unsupported schema_version '{found}' (expected '{expected}')")]
    Version { found: String, expected: &'static str },
    #[error("graph '{graph_id}' is invalid: {violations:?}")]
    Invalid {
        graph_id: String,
        violations: Vec<Violation>,
    },
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<GraphError>,
    },
    #[error("duplicate graph_id '{0}' in corpus")]
    DuplicateGraphId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Canonical node types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeType {
    Map,
    Ego,
    EgoAction,
    Obstacles,
    ObstaclesAction,
    Outcome,
}

impl NodeType {
    pub const ALL: [NodeType; 6] = [
        NodeType::Map,
        NodeType::Ego,
        NodeType::EgoAction,
        NodeType::Obstacles,
        NodeType::ObstaclesAction,
        NodeType::Outcome,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::Map => "MAP",
            NodeType::Ego => "EGO",
            NodeType::EgoAction => "EGO_ACTION",
            NodeType::Obstacles => "OBSTACLES",
            NodeType::ObstaclesAction => "OBSTACLES_ACTION",
            NodeType::Outcome => "OUTCOME",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeType {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| GraphError::UnknownNodeType(s.to_string()))
    }
}

/// Whether a graph came from an incident-free log or a crash narrative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataClass {
    Positive,
    Negative,
}

impl DataClass {
    /// Tag shown next to precedents in prompts.
    pub fn tag(self) -> &'static str {
        match self {
            DataClass::Positive => "POSITIVE",
            DataClass::Negative => "NEGATIVE",
        }
    }
}

impl fmt::Display for DataClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataClass::Positive => "positive",
            DataClass::Negative => "negative",
        })
    }
}

/// Provenance of a graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub dataset: String,
    pub record_id: String,
    pub pipeline_version: String,
    /// Prompt/template version used by the extraction provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_version: Option<String>,
    /// Fingerprint of the embedding provider that produced node vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_fingerprint: Option<String>,
}

impl Source {
    pub fn new(
        dataset: impl Into<String>,
        record_id: impl Into<String>,
        pipeline_version: impl Into<String>,
    ) -> Self {
        Source {
            dataset: dataset.into(),
            record_id: record_id.into(),
            pipeline_version: pipeline_version.into(),
            prompt_version: None,
            embed_fingerprint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub node_id: String,
    pub node_type: NodeType,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub embedding: Option<EmbeddingVector>,
}

impl GraphNode {
    pub fn new(
        node_id: impl Into<String>,
        node_type: NodeType,
        name: impl Into<String>,
        description: impl Into<String>,
    ) -> Self {
        GraphNode {
            node_id: node_id.into(),
            node_type,
            name: name.into(),
            description: description.into(),
            embedding: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneActionGraph {
    pub graph_id: String,
    pub data_class: DataClass,
    pub source: Source,
    #[serde(default)]
    pub media: Option<String>,
    pub nodes: Vec<GraphNode>,
}

impl SceneActionGraph {
    pub fn new(graph_id: impl Into<String>, data_class: DataClass, source: Source) -> Self {
        SceneActionGraph {
            graph_id: graph_id.into(),
            data_class,
            source,
            media: None,
            nodes: Vec::new(),
        }
    }

    /// Builder-style insert; the node id is derived from the graph id.
    pub fn with_node(mut self, node_type: NodeType, name: &str, description: &str) -> Self {
        let id = format!("{}/{}", self.graph_id, node_type);
        self.nodes.push(GraphNode::new(id, node_type, name, description));
        self
    }

    /// First node of the given type.
    pub fn node(&self, node_type: NodeType) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.node_type == node_type)
    }

    pub fn node_mut(&mut self, node_type: NodeType) -> Option<&mut GraphNode> {
        self.nodes.iter_mut().find(|n| n.node_type == node_type)
    }

    pub fn nodes_of(&self, node_type: NodeType) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(move |n| n.node_type == node_type)
    }

    pub fn has_type(&self, node_type: NodeType) -> bool {
        self.node(node_type).is_some()
    }

    pub fn node_types(&self) -> BTreeSet<NodeType> {
        self.nodes.iter().map(|n| n.node_type).collect()
    }

    pub fn remove_type(&mut self, node_type: NodeType) {
        self.nodes.retain(|n| n.node_type != node_type);
    }

    pub fn is_fully_embedded(&self) -> bool {
        self.nodes.iter().all(|n| n.embedding.is_some())
    }

    /// Node descriptions in canonical type order, one `TYPE: text` per line.
    pub fn render_nodes(&self) -> String {
        let mut nodes: Vec<&GraphNode> = self.nodes.iter().collect();
        nodes.sort_by_key(|n| n.node_type);
        nodes
            .iter()
            .map(|n| format!("{}: {}", n.node_type, n.description))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// One invariant violation found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node_type: Option<NodeType>,
    pub field: String,
    pub reason: String,
}

impl Violation {
    fn new(node_type: Option<NodeType>, field: &str, reason: impl Into<String>) -> Self {
        Violation {
            node_type,
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node_type {
            Some(t) => write!(f, "{t}/{}: {}", self.field, self.reason),
            None => write!(f, "{}: {}", self.field, self.reason),
        }
    }
}

/// Lists every invariant the graph violates; an empty list means valid.
pub fn validate_graph(graph: &SceneActionGraph) -> Vec<Violation> {
    let mut out = Vec::new();

    if graph.graph_id.trim().is_empty() {
        out.push(Violation::new(None, "graph_id", "must be non-empty"));
    }
    for required in [NodeType::Ego, NodeType::EgoAction] {
        if !graph.has_type(required) {
            out.push(Violation::new(Some(required), "node_type", "required node type missing"));
        }
    }
    if graph.data_class == DataClass::Negative && !graph.has_type(NodeType::Outcome) {
        out.push(Violation::new(
            Some(NodeType::Outcome),
            "node_type",
            "negative graphs must carry an outcome node",
        ));
    }

    let mut seen_types = BTreeSet::new();
    let mut seen_ids = BTreeSet::new();
    let mut dim = None;
    for node in &graph.nodes {
        let t = Some(node.node_type);
        if !seen_types.insert(node.node_type) {
            out.push(Violation::new(t, "node_type", "more than one node of this type"));
        }
        if node.node_id.trim().is_empty() {
            out.push(Violation::new(t, "node_id", "must be non-empty"));
        } else if !seen_ids.insert(node.node_id.as_str()) {
            out.push(Violation::new(t, "node_id", format!("duplicate node_id '{}'", node.node_id)));
        }
        if node.description.trim().is_empty() {
            out.push(Violation::new(t, "description", "must be non-empty"));
        } else if node.node_type == NodeType::Outcome
            && !(node.description.starts_with(COLLISION_MARKER)
                || node.description.starts_with(NO_COLLISION_MARKER))
        {
            out.push(Violation::new(
                t,
                "description",
                "outcome must begin with COLLISION or NO COLLISION",
            ));
        }
        if let Some(e) = &node.embedding {
            if e.dim() == 0 {
                out.push(Violation::new(t, "embedding", "empty vector"));
            } else if (e.norm() - 1.0).abs() > NORM_TOLERANCE {
                out.push(Violation::new(t, "embedding", "vector is not unit-normalized"));
            }
            match dim {
                None => dim = Some(e.dim()),
                Some(d) if d != e.dim() => {
                    out.push(Violation::new(t, "embedding", format!("dim {} differs from {d}", e.dim())))
                }
                _ => {}
            }
        }
    }
    out
}
