//! Crash-report and driving-log ingestion.
//!
//! Crash narratives go through normalize -> extract -> embed; driving-log
//! captures go through compose -> extract -> embed. Either way the result is
//! a validated, embedded [`SceneActionGraph`] appended atomically to a
//! corpus file. The text work is done by a [`TextTransformer`]: a chat-model
//! backed one for real runs, or the rule-based one for offline tests.

mod llm_extract;
pub mod rules;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{embed_text, EmbeddingError, EmbeddingProvider};
use crate::graph::{
    read_corpus, validate_graph, write_corpus, DataClass, GraphError, GraphNode, NodeType, SceneActionGraph, Source,
    COLLISION_MARKER, NO_COLLISION_MARKER,
};
use crate::llm::{ProviderError, RemoteChat, RemoteChatConfig};
use crate::prompts::PromptTemplates;

pub use llm_extract::LlmTransformer;
pub use rules::RuleBasedTransformer;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("normalized text still contains {0:?}")]
    NormalizationQuality(Vec<String>),
    #[error("extraction output does not fit the schema: {violations:?}")]
    Extraction { raw_output: String, violations: Vec<String> },
    #[error("embedding node {node_type} of '{graph_id}': {source}")]
    Embedding {
        graph_id: String,
        node_type: NodeType,
        #[source]
        source: EmbeddingError,
    },
    #[error("graph_id '{0}' already exists in the corpus")]
    DuplicateId(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A free-text crash narrative as sourced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashNarrative {
    pub report_id: String,
    pub raw_text: String,
    pub source_agency: String,
}

/// A captioned driving-log segment plus its metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrivingLogCapture {
    pub capture_id: String,
    pub caption: String,
    #[serde(default)]
    pub agent_types: Vec<String>,
    #[serde(default)]
    pub relative_positions: Vec<String>,
    #[serde(default)]
    pub map_note: String,
    #[serde(default, rename = "image")]
    pub image_ref: Option<String>,
}

impl DrivingLogCapture {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.capture_id.trim().is_empty() {
            return Err(IngestError::InvalidInput("capture_id is empty".into()));
        }
        if self.caption.trim().is_empty() {
            return Err(IngestError::InvalidInput(format!("capture '{}' has an empty caption", self.capture_id)));
        }
        if self.agent_types.len() != self.relative_positions.len() {
            return Err(IngestError::InvalidInput(format!(
                "capture '{}': {} agent types but {} relative positions",
                self.capture_id,
                self.agent_types.len(),
                self.relative_positions.len()
            )));
        }
        Ok(())
    }
}

fn quoted_list(items: &[String]) -> String {
    let inner: Vec<String> = items.iter().map(|s| format!("'{s}'")).collect();
    format!("[{}]", inner.join(" "))
}

/// Composes caption and metadata into one text block in a fixed order:
/// caption, agent types, relative positions, map note. Empty metadata lines
/// are omitted.
pub fn compose_scene_text(caption: &str, agent_types: &[String], relative_positions: &[String], map_note: &str) -> String {
    let mut out = caption.trim().to_string();
    let has_agents = !agent_types.is_empty();
    let has_map = !map_note.trim().is_empty();
    if has_agents || has_map {
        out.push_str("\nFollowing is the meta-data:");
    }
    if has_agents {
        out.push_str(&format!("\nThe types of agents in proximity are: {}", quoted_list(agent_types)));
        out.push_str(&format!(
            "\nThe relative positions of these agents with respect to ego agent are: {}",
            quoted_list(relative_positions)
        ));
    }
    if has_map {
        out.push('\n');
        out.push_str(map_note.trim());
    }
    out
}

/// Text-to-text work behind ingestion: style normalization and schema
/// extraction.
pub trait TextTransformer: Send + Sync {
    /// Rewrites a third-person narrative from the ego vehicle's viewpoint.
    fn normalize(&self, narrative: &str) -> Result<String, IngestError>;

    /// Returns raw extraction output: a JSON object
    /// `{"nodes":[{"type","name","description"}]}`. On a retry `repair`
    /// lists what was wrong with the previous attempt.
    fn extract(&self, text: &str, data_class: DataClass, repair: Option<&str>) -> Result<String, IngestError>;

    fn pipeline_version(&self) -> String;

    fn prompt_version(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionProviderKind {
    Remote,
    DeterministicRuleBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionProviderConfig {
    pub provider_kind: ExtractionProviderKind,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Directory overriding the bundled prompt templates.
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
    #[serde(default)]
    pub temperature: f64,
}

impl ExtractionProviderConfig {
    pub fn rule_based() -> Self {
        ExtractionProviderConfig {
            provider_kind: ExtractionProviderKind::DeterministicRuleBased,
            model_name: None,
            endpoint: None,
            prompt_dir: None,
            temperature: 0.0,
        }
    }

    /// Remote config from `LLM_ENDPOINT` / `LLM_MODEL`.
    pub fn remote_from_env() -> Result<Self, IngestError> {
        let chat = RemoteChatConfig::from_env()?;
        Ok(ExtractionProviderConfig {
            provider_kind: ExtractionProviderKind::Remote,
            model_name: Some(chat.model),
            endpoint: Some(chat.endpoint),
            prompt_dir: None,
            temperature: 0.0,
        })
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.temperature != 0.0 {
            return Err(IngestError::Config("extraction temperature is fixed at 0".into()));
        }
        if self.provider_kind == ExtractionProviderKind::Remote
            && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty())
        {
            return Err(IngestError::Config("remote extraction requires an endpoint".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn TextTransformer>, IngestError> {
        self.validate()?;
        match self.provider_kind {
            ExtractionProviderKind::DeterministicRuleBased => Ok(Box::new(RuleBasedTransformer)),
            ExtractionProviderKind::Remote => {
                let templates = match &self.prompt_dir {
                    Some(dir) => PromptTemplates::load_dir(dir)?,
                    None => PromptTemplates::default(),
                };
                let model = self.model_name.clone().unwrap_or_else(|| "default".into());
                let chat = RemoteChat::new(RemoteChatConfig {
                    endpoint: self.endpoint.clone().unwrap_or_default(),
                    model: model.clone(),
                    temperature: 0.0,
                    timeout_secs: 120,
                    max_retries: 2,
                    multimodal: false,
                });
                Ok(Box::new(LlmTransformer::new(Box::new(chat), model, templates)))
            }
        }
    }
}

/// Normalizes a crash narrative and checks that no entity tag or compass
/// heading survived.
pub fn normalize_narrative(narrative: &CrashNarrative, transformer: &dyn TextTransformer) -> Result<String, IngestError> {
    if narrative.raw_text.trim().is_empty() {
        return Err(IngestError::InvalidInput(format!("report '{}' has an empty narrative", narrative.report_id)));
    }
    let text = transformer.normalize(&narrative.raw_text)?;
    let residual = rules::residual_tokens(&text);
    if !residual.is_empty() {
        return Err(IngestError::NormalizationQuality(residual));
    }
    if text.trim().is_empty() {
        return Err(IngestError::NormalizationQuality(vec!["<empty output>".into()]));
    }
    Ok(text)
}

#[derive(Deserialize)]
struct RawExtraction {
    nodes: Vec<RawNode>,
}

#[derive(Deserialize)]
struct RawNode {
    #[serde(rename = "type")]
    node_type: String,
    #[serde(default)]
    name: Option<String>,
    description: String,
}

/// Model output sometimes wraps the object in prose or code fences.
fn json_object_span(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

fn parse_drafts(raw: &str) -> Result<Vec<(NodeType, String, String)>, Vec<String>> {
    let body = json_object_span(raw).ok_or_else(|| vec!["output contains no JSON object".to_string()])?;
    let parsed: RawExtraction = serde_json::from_str(body).map_err(|e| vec![format!("not valid extraction JSON: {e}")])?;
    let mut problems = Vec::new();
    let mut drafts = Vec::new();
    for (i, n) in parsed.nodes.into_iter().enumerate() {
        match n.node_type.trim().parse::<NodeType>() {
            Ok(t) => drafts.push((t, n.name.unwrap_or_default(), n.description)),
            Err(_) => problems.push(format!("nodes[{i}].type '{}' is not a known node type", n.node_type)),
        }
    }
    if problems.is_empty() {
        Ok(drafts)
    } else {
        Err(problems)
    }
}

const NO_COLLISION_PHRASES: &[&str] = &[
    "no collision",
    "did not collide",
    "avoided a collision",
    "avoided the collision",
    "avoided collision",
    "without colliding",
    "no contact",
    "near-miss",
    "near miss",
];

/// Outcome marker implied by the narrative text.
pub fn outcome_marker(text: &str) -> &'static str {
    let lower = text.to_lowercase();
    if NO_COLLISION_PHRASES.iter().any(|p| lower.contains(p)) {
        NO_COLLISION_MARKER
    } else {
        COLLISION_MARKER
    }
}

fn join_unique<'a>(items: impl Iterator<Item = &'a str>, sep: &str) -> String {
    let mut seen = BTreeSet::new();
    let kept: Vec<&str> = items
        .map(str::trim)
        .filter(|s| !s.is_empty() && seen.insert(*s))
        .collect();
    kept.join(sep)
}

fn with_marker(marker: &str, details: &str) -> String {
    let rest = details
        .trim()
        .strip_prefix(NO_COLLISION_MARKER)
        .or_else(|| details.trim().strip_prefix(COLLISION_MARKER))
        .unwrap_or(details.trim())
        .trim_start_matches([':', ' ', '-', ';'])
        .trim();
    if rest.is_empty() {
        marker.to_string()
    } else {
        format!("{marker}: {rest}")
    }
}

struct GraphShell<'a> {
    graph_id: &'a str,
    data_class: DataClass,
    source: Source,
    media: Option<String>,
}

/// Merges same-type drafts into one node each and applies the outcome rule.
fn assemble(shell: &GraphShell<'_>, drafts: &[(NodeType, String, String)], text: &str) -> SceneActionGraph {
    let mut graph = SceneActionGraph::new(shell.graph_id, shell.data_class, shell.source.clone());
    graph.media = shell.media.clone();
    for t in NodeType::ALL {
        let of_type: Vec<&(NodeType, String, String)> = drafts.iter().filter(|d| d.0 == t).collect();
        if t == NodeType::Outcome {
            if shell.data_class == DataClass::Positive {
                continue;
            }
            let details = join_unique(of_type.iter().map(|d| d.2.as_str()), "; ");
            let description = with_marker(outcome_marker(text), &details);
            graph.nodes.push(GraphNode::new(format!("{}/{t}", shell.graph_id), t, "outcome", description));
            continue;
        }
        if of_type.is_empty() {
            continue;
        }
        let name = join_unique(of_type.iter().map(|d| d.1.as_str()), ", ");
        let description = join_unique(of_type.iter().map(|d| d.2.as_str()), "; ");
        let name = if name.is_empty() { t.as_str().to_lowercase() } else { name };
        graph.nodes.push(GraphNode::new(format!("{}/{t}", shell.graph_id), t, name, description));
    }
    graph
}

fn drafts_to_graph(shell: &GraphShell<'_>, raw: &str, text: &str) -> Result<SceneActionGraph, Vec<String>> {
    let drafts = parse_drafts(raw)?;
    let graph = assemble(shell, &drafts, text);
    let violations = validate_graph(&graph);
    if violations.is_empty() {
        Ok(graph)
    } else {
        Err(violations.iter().map(ToString::to_string).collect())
    }
}

/// Parses text into an unembedded graph with at most one node per type.
///
/// Output that does not fit the schema is retried once with the problems
/// appended to the request; a second failure returns the raw output for
/// audit.
pub fn extract_graph(
    text: &str,
    data_class: DataClass,
    graph_id: &str,
    source: Source,
    media: Option<String>,
    transformer: &dyn TextTransformer,
) -> Result<SceneActionGraph, IngestError> {
    if text.trim().is_empty() {
        return Err(IngestError::InvalidInput("cannot extract a graph from empty text".into()));
    }
    let mut source = source;
    source.prompt_version = Some(transformer.prompt_version());
    let shell = GraphShell {
        graph_id,
        data_class,
        source,
        media,
    };
    let first = transformer.extract(text, data_class, None)?;
    let problems = match drafts_to_graph(&shell, &first, text) {
        Ok(g) => return Ok(g),
        Err(p) => p,
    };
    let repair = problems.join("\n");
    let second = transformer.extract(text, data_class, Some(&repair))?;
    drafts_to_graph(&shell, &second, text).map_err(|violations| IngestError::Extraction {
        raw_output: second,
        violations,
    })
}

/// Like [`extract_graph`] but tolerates a missing ego-action node, which
/// query construction supplies itself.
pub(crate) fn extract_query_nodes(
    text: &str,
    graph_id: &str,
    source: Source,
    transformer: &dyn TextTransformer,
) -> Result<SceneActionGraph, IngestError> {
    let mut source = source;
    source.prompt_version = Some(transformer.prompt_version());
    let shell = GraphShell {
        graph_id,
        data_class: DataClass::Positive,
        source,
        media: None,
    };
    let mut last_raw = String::new();
    let mut repair: Option<String> = None;
    let mut violations = Vec::new();
    for _ in 0..2 {
        last_raw = transformer.extract(text, DataClass::Positive, repair.as_deref())?;
        match parse_drafts(&last_raw) {
            Ok(drafts) => {
                let graph = assemble(&shell, &drafts, text);
                if graph.has_type(NodeType::Ego) {
                    return Ok(graph);
                }
                violations = vec![format!("{}/node_type: required node type missing", NodeType::Ego)];
            }
            Err(p) => violations = p,
        }
        repair = Some(violations.join("\n"));
    }
    Err(IngestError::Extraction {
        raw_output: last_raw,
        violations,
    })
}

/// Embeds every node description, replacing existing vectors, and records
/// the provider fingerprint in the graph's provenance.
pub fn embed_graph_nodes(graph: &SceneActionGraph, provider: &dyn EmbeddingProvider) -> Result<SceneActionGraph, IngestError> {
    let mut out = graph.clone();
    for node in &mut out.nodes {
        let v = embed_text(&node.description, provider).map_err(|source| IngestError::Embedding {
            graph_id: graph.graph_id.clone(),
            node_type: node.node_type,
            source,
        })?;
        node.embedding = Some(v);
    }
    out.source.embed_fingerprint = Some(provider.fingerprint());
    Ok(out)
}

pub fn crash_graph_id(report_id: &str) -> String {
    format!("crash:{report_id}")
}

pub fn log_graph_id(capture_id: &str) -> String {
    format!("log:{capture_id}")
}

fn ensure_absent(corpus: &Path, graph_id: &str) -> Result<(), IngestError> {
    if read_corpus(corpus)?.iter().any(|g| g.graph_id == graph_id) {
        return Err(IngestError::DuplicateId(graph_id.to_string()));
    }
    Ok(())
}

/// Appends one graph to the corpus. The file is rewritten through a temp
/// file and rename, so a failure leaves the previous contents intact.
pub fn append_to_corpus(corpus: &Path, graph: &SceneActionGraph) -> Result<(), IngestError> {
    let mut graphs = read_corpus(corpus)?;
    if graphs.iter().any(|g| g.graph_id == graph.graph_id) {
        return Err(IngestError::DuplicateId(graph.graph_id.clone()));
    }
    graphs.push(graph.clone());
    write_corpus(corpus, &graphs)?;
    Ok(())
}

/// Shared pieces of an ingestion run.
pub struct Pipeline<'a> {
    pub transformer: &'a dyn TextTransformer,
    pub embedder: &'a dyn EmbeddingProvider,
}

impl Pipeline<'_> {
    /// Normalize, extract, embed and append one crash report as a Negative
    /// record. Nothing is written if any stage fails.
    pub fn ingest_crash_report(&self, narrative: &CrashNarrative, corpus: &Path) -> Result<SceneActionGraph, IngestError> {
        if narrative.report_id.trim().is_empty() {
            return Err(IngestError::InvalidInput("report_id is empty".into()));
        }
        let graph_id = crash_graph_id(&narrative.report_id);
        ensure_absent(corpus, &graph_id)?;
        let text = normalize_narrative(narrative, self.transformer)?;
        let source = Source::new(&narrative.source_agency, &narrative.report_id, self.transformer.pipeline_version());
        let graph = extract_graph(&text, DataClass::Negative, &graph_id, source, None, self.transformer)?;
        let graph = embed_graph_nodes(&graph, self.embedder)?;
        append_to_corpus(corpus, &graph)?;
        Ok(graph)
    }

    /// Compose, extract, embed and append one driving-log capture as a
    /// Positive record.
    pub fn ingest_driving_log(&self, capture: &DrivingLogCapture, corpus: &Path) -> Result<SceneActionGraph, IngestError> {
        capture.validate()?;
        let graph_id = log_graph_id(&capture.capture_id);
        ensure_absent(corpus, &graph_id)?;
        let text = compose_scene_text(&capture.caption, &capture.agent_types, &capture.relative_positions, &capture.map_note);
        let source = Source::new("driving-log", &capture.capture_id, self.transformer.pipeline_version());
        let graph = extract_graph(&text, DataClass::Positive, &graph_id, source, capture.image_ref.clone(), self.transformer)?;
        let graph = embed_graph_nodes(&graph, self.embedder)?;
        append_to_corpus(corpus, &graph)?;
        Ok(graph)
    }
}

fn sorted_files(input: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>, IngestError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(input)? {
        let path = entry?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| extensions.contains(&e));
        if path.is_file() && ext_ok {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads crash narratives: a single file, or every `.txt` file of a
/// directory in name order. The file stem is the report id.
pub fn read_crash_inputs(input: &Path, source_agency: &str) -> Result<Vec<CrashNarrative>, IngestError> {
    sorted_files(input, &["txt"])?
        .into_iter()
        .map(|path| {
            let report_id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| IngestError::InvalidInput(format!("bad file name {}", path.display())))?
                .to_string();
            Ok(CrashNarrative {
                report_id,
                raw_text: std::fs::read_to_string(&path)?,
                source_agency: source_agency.to_string(),
            })
        })
        .collect()
}

/// Loads driving-log captures from `.json` (one record) and `.jsonl` (one
/// per line) files, in file-name then line order.
pub fn read_log_inputs(input: &Path) -> Result<Vec<DrivingLogCapture>, IngestError> {
    let mut out = Vec::new();
    for path in sorted_files(input, &["json", "jsonl"])? {
        let text = std::fs::read_to_string(&path)?;
        let parse = |s: &str, what: String| {
            serde_json::from_str::<DrivingLogCapture>(s).map_err(|e| IngestError::InvalidInput(format!("{what}: {e}")))
        };
        if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                out.push(parse(line, format!("{}:{}", path.display(), i + 1))?);
            }
        } else {
            out.push(parse(&text, path.display().to_string())?);
        }
    }
    Ok(out)
}

/// Outcome of a corpus lint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LintReport {
    pub count: usize,
    pub positives: usize,
    pub negatives: usize,
    pub problems: Vec<String>,
}

impl LintReport {
    pub fn passed(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Corpus-wide checks: every record parses and validates (so every Negative
/// record has an outcome), ids are unique, and all vectors come from one
/// provider with one dimension.
pub fn lint_corpus(path: &Path) -> LintReport {
    let mut report = LintReport::default();
    let graphs = match read_corpus(path) {
        Ok(g) => g,
        Err(e) => {
            report.problems.push(e.to_string());
            return report;
        }
    };
    report.count = graphs.len();
    let mut fingerprints = BTreeSet::new();
    let mut dims = BTreeSet::new();
    for g in &graphs {
        match g.data_class {
            DataClass::Positive => report.positives += 1,
            DataClass::Negative => report.negatives += 1,
        }
        for v in validate_graph(g) {
            report.problems.push(format!("{}: {v}", g.graph_id));
        }
        fingerprints.insert(g.source.embed_fingerprint.clone());
        for n in &g.nodes {
            match &n.embedding {
                Some(e) => {
                    dims.insert(e.dim());
                }
                None => report.problems.push(format!("{}: {} has no embedding", g.graph_id, n.node_type)),
            }
        }
    }
    if fingerprints.len() > 1 {
        report.problems.push(format!("mixed embedding fingerprints: {fingerprints:?}"));
    }
    if dims.len() > 1 {
        report.problems.push(format!("mixed embedding dimensions: {dims:?}"));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;

    struct Canned(Vec<String>, std::sync::Mutex<usize>);

    impl Canned {
        fn new(outputs: &[&str]) -> Self {
            Canned(outputs.iter().map(|s| s.to_string()).collect(), std::sync::Mutex::new(0))
        }
    }

    impl TextTransformer for Canned {
        fn normalize(&self, n: &str) -> Result<String, IngestError> {
            Ok(n.to_string())
        }
        fn extract(&self, _: &str, _: DataClass, _: Option<&str>) -> Result<String, IngestError> {
            let mut i = self.1.lock().unwrap();
            let out = self.0[(*i).min(self.0.len() - 1)].clone();
            *i += 1;
            Ok(out)
        }
        fn pipeline_version(&self) -> String {
            "canned".into()
        }
        fn prompt_version(&self) -> String {
            "canned-v0".into()
        }
    }

    fn source() -> Source {
        Source::new("test", "1", "v")
    }

    #[test]
    fn same_type_mentions_are_merged() {
        let raw = r#"{"nodes":[
            {"type":"EGO","name":"ego","description":"ego in lane 2"},
            {"type":"EGO_ACTION","name":"a","description":"TURN LEFT"},
            {"type":"OBSTACLES","name":"sedan","description":"a sedan ahead"},
            {"type":"OBSTACLES","name":"truck","description":"a truck on the right"}]}"#;
        let g = extract_graph("text", DataClass::Negative, "g", source(), None, &Canned::new(&[raw])).unwrap();
        let obstacles: Vec<_> = g.nodes_of(NodeType::Obstacles).collect();
        assert_eq!(obstacles.len(), 1);
        assert_eq!(obstacles[0].description, "a sedan ahead; a truck on the right");
        assert_eq!(obstacles[0].name, "sedan, truck");
        assert_eq!(g.node(NodeType::Outcome).unwrap().description, "COLLISION");
        assert_eq!(g.source.prompt_version.as_deref(), Some("canned-v0"));
    }

    #[test]
    fn no_collision_text_gets_no_collision_marker() {
        let raw = r#"{"nodes":[{"type":"EGO","description":"ego"},{"type":"EGO_ACTION","description":"STOP"},
            {"type":"OUTCOME","description":"COLLISION: none, braked in time"}]}"#;
        let g = extract_graph("The ego vehicle braked and avoided the collision.", DataClass::Negative, "g", source(), None, &Canned::new(&[raw])).unwrap();
        assert_eq!(g.node(NodeType::Outcome).unwrap().description, "NO COLLISION: none, braked in time");
    }

    #[test]
    fn schema_violation_is_retried_once() {
        let bad = r#"{"nodes":[{"type":"CAR","description":"x"}]}"#;
        let good = r#"```json
{"nodes":[{"type":"EGO","description":"ego"},{"type":"EGO_ACTION","description":"STOP"}]}
```"#;
        let t = Canned::new(&[bad, good]);
        let g = extract_graph("text", DataClass::Positive, "g", source(), None, &t).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(*t.1.lock().unwrap(), 2);
    }

    #[test]
    fn second_failure_carries_raw_output() {
        let bad = r#"{"nodes":[{"type":"MAP","description":"road"}]}"#;
        match extract_graph("text", DataClass::Positive, "g", source(), None, &Canned::new(&[bad])) {
            Err(IngestError::Extraction { raw_output, violations }) => {
                assert_eq!(raw_output, bad);
                assert!(violations.iter().any(|v| v.contains("EGO")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn positive_graphs_drop_outcome_entries() {
        let raw = r#"{"nodes":[{"type":"EGO","description":"ego"},{"type":"EGO_ACTION","description":"STOP"},
            {"type":"OUTCOME","description":"COLLISION"}]}"#;
        let g = extract_graph("text", DataClass::Positive, "g", source(), None, &Canned::new(&[raw])).unwrap();
        assert!(!g.has_type(NodeType::Outcome));
    }

    #[test]
    fn compose_orders_metadata() {
        let text = compose_scene_text(
            "Cars around the ego vehicle.",
            &["VEHICLE".into(), "PEDESTRIAN".into()],
            &["FRONT_LEFT".into(), "REAR".into()],
            "The ego vehicle is on a road with no mergers or intersections.",
        );
        assert_eq!(
            text,
            "Cars around the ego vehicle.\nFollowing is the meta-data:\n\
             The types of agents in proximity are: ['VEHICLE' 'PEDESTRIAN']\n\
             The relative positions of these agents with respect to ego agent are: ['FRONT_LEFT' 'REAR']\n\
             The ego vehicle is on a road with no mergers or intersections."
        );
        assert_eq!(compose_scene_text("Only caption.", &[], &[], ""), "Only caption.");
    }

    #[test]
    fn embedding_is_deterministic_and_complete() {
        let e = HashEmbedder::new(64).unwrap();
        let g = SceneActionGraph::new("g", DataClass::Positive, source())
            .with_node(NodeType::Map, "m", "urban road")
            .with_node(NodeType::Ego, "e", "ego vehicle")
            .with_node(NodeType::EgoAction, "a", "STOP")
            .with_node(NodeType::Obstacles, "o", "two cars");
        let a = embed_graph_nodes(&g, &e).unwrap();
        assert_eq!(a.nodes.iter().filter(|n| n.embedding.as_ref().is_some_and(|v| v.dim() == 64)).count(), 4);
        assert_eq!(embed_graph_nodes(&a, &e).unwrap(), a);
        let mut other = g.clone();
        other.graph_id = "h".into();
        let b = embed_graph_nodes(&other, &e).unwrap();
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert_eq!(x.embedding, y.embedding);
        }
    }

    #[test]
    fn capture_validation() {
        let mut c = DrivingLogCapture {
            capture_id: "c".into(),
            caption: "cap".into(),
            agent_types: vec!["VEHICLE".into()],
            relative_positions: vec![],
            map_note: String::new(),
            image_ref: None,
        };
        assert!(c.validate().is_err());
        c.relative_positions.push("LEFT".into());
        assert!(c.validate().is_ok());
        c.caption = " ".into();
        assert!(c.validate().is_err());
    }
}
