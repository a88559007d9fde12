//! The three reasoning engines.
//!
//! All engines end with one verdict prompt whose user message is assembled
//! from blocks in a fixed order: scene, retrieved scenarios, explored
//! alternatives, reasoning instruction, proposed action, label instruction.
//! Blocks an engine has no content for are left out. The agentic engine
//! first runs a propose -> retrieve -> evaluate loop over alternative
//! actions, then adjudicates the original candidate with every trial in
//! view.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::EmbeddingProvider;
use crate::graph::{
    parse_action, parse_outcome_label, DataClass, DrivingAction, GraphNode, NodeType, OutcomeLabel, SceneActionGraph,
    Source,
};
use crate::index::{ClassFilter, IndexError, PrecedentIndex, RetrievalResult, TypeWeights, DEFAULT_K};
use crate::ingestion::{compose_scene_text, embed_graph_nodes, extract_query_nodes, IngestError, TextTransformer};
use crate::llm::{ChatMessage, ChatProvider, ProviderError, ReplayChat, Role};
use crate::prompts::PromptTemplates;

pub const DEFAULT_MAX_ITERATIONS: usize = 3;

/// Token with which the model ends the exploration loop.
pub const FINALIZE_TOKEN: &str = "FINALIZE";

/// Line prefix marking a proposed alternative.
pub const ALTERNATE_PREFIX: &str = "ALTERNATE ACTION:";

pub const QUERY_GRAPH_ID: &str = "query";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMetadata {
    #[serde(default)]
    pub agent_types: Vec<String>,
    #[serde(default)]
    pub relative_positions: Vec<String>,
    #[serde(default)]
    pub map_note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneQuery {
    pub description: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub metadata: SceneMetadata,
    pub candidate_action: DrivingAction,
}

impl SceneQuery {
    pub fn new(description: impl Into<String>, candidate_action: DrivingAction) -> Self {
        SceneQuery {
            description: description.into(),
            image_ref: None,
            metadata: SceneMetadata::default(),
            candidate_action,
        }
    }

    pub fn validate(&self) -> Result<(), AdjudicationError> {
        if self.description.trim().is_empty() {
            return Err(AdjudicationError::InvalidQuery("scene description is empty".into()));
        }
        if self.candidate_action.canonical().trim().is_empty() {
            return Err(AdjudicationError::InvalidQuery("candidate action is empty".into()));
        }
        if self.metadata.agent_types.len() != self.metadata.relative_positions.len() {
            return Err(AdjudicationError::InvalidQuery(
                "agent_types and relative_positions differ in length".into(),
            ));
        }
        Ok(())
    }

    /// Description and metadata composed the same way driving logs are.
    pub fn scene_text(&self) -> String {
        compose_scene_text(
            &self.description,
            &self.metadata.agent_types,
            &self.metadata.relative_positions,
            &self.metadata.map_note,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Base,
    Rag,
    RagPosOnly,
    Agentic,
}

impl EngineKind {
    pub const ALL: [EngineKind; 4] = [EngineKind::Base, EngineKind::Rag, EngineKind::RagPosOnly, EngineKind::Agentic];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Base => "base",
            EngineKind::Rag => "rag",
            EngineKind::RagPosOnly => "rag-pos-only",
            EngineKind::Agentic => "agentic",
        }
    }

    pub fn class_filter(self) -> ClassFilter {
        match self {
            EngineKind::RagPosOnly => ClassFilter::Positive,
            _ => ClassFilter::All,
        }
    }

    pub fn uses_retrieval(self) -> bool {
        self != EngineKind::Base
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngineKind {
    type Err = AdjudicationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EngineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| AdjudicationError::InvalidQuery(format!("unknown engine kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub kind: EngineKind,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Falls back to the index's build weights when absent.
    #[serde(default)]
    pub weights: Option<TypeWeights>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}

impl EngineConfig {
    pub fn new(kind: EngineKind) -> Self {
        EngineConfig {
            kind,
            k: DEFAULT_K,
            weights: None,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_weights(mut self, weights: TypeWeights) -> Self {
        self.weights = Some(weights);
        self
    }

    /// Stable description of everything that influences a run.
    pub fn fingerprint(&self, templates: &PromptTemplates) -> String {
        let weights = self
            .weights
            .as_ref()
            .map(|w| {
                NodeType::ALL
                    .iter()
                    .map(|t| format!("{t}={}", w.get(*t)))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .unwrap_or_else(|| "index".into());
        match self.kind {
            EngineKind::Base => format!("base;prompts={}", templates.version),
            EngineKind::Agentic => format!(
                "agentic;k={};weights={weights};max_iterations={};prompts={}",
                self.k, self.max_iterations, templates.version
            ),
            kind => format!("{kind};k={};weights={weights};prompts={}", self.k, templates.version),
        }
    }
}

/// A retrieved graph together with the text shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precedent {
    #[serde(flatten)]
    pub result: RetrievalResult,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualTrial {
    pub proposed_action: DrivingAction,
    pub retrievals: Vec<Precedent>,
    pub trial_label: OutcomeLabel,
    pub trial_justification: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Finalized,
    DuplicateProposal,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CallPurpose {
    Verdict,
    VerdictRetry,
    Propose,
    ProposeRetry,
    Evaluate,
    EvaluateRetry,
}

/// One provider call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub purpose: CallPurpose,
    pub messages: Vec<ChatMessage>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationEpisode {
    pub episode_id: String,
    pub engine_kind: EngineKind,
    pub engine_fingerprint: String,
    pub query: SceneQuery,
    pub retrievals: Vec<Precedent>,
    pub trials: Vec<CounterfactualTrial>,
    pub verdict: OutcomeLabel,
    pub justification: String,
    pub iteration_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    pub prompt_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_fingerprint: Option<String>,
    pub transcript: Vec<TranscriptEntry>,
}

impl AdjudicationEpisode {
    /// A provider that answers this episode's calls again, in order, and
    /// rejects any prompt that differs from the recording.
    pub fn replay_provider(&self) -> ReplayChat {
        ReplayChat::new(
            self.transcript
                .iter()
                .map(|e| (e.messages.clone(), e.response.clone()))
                .collect(),
        )
    }

    /// `(graph_id, data class, score)` for each precedent cited in the
    /// final prompt, initial retrievals first.
    pub fn citations(&self) -> Vec<(&str, DataClass, f64)> {
        self.retrievals
            .iter()
            .chain(self.trials.iter().flat_map(|t| &t.retrievals))
            .map(|p| (p.result.graph_id.as_str(), p.result.data_class, p.result.score))
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        crate::fsutil::atomic_write(path, format!("{text}\n").as_bytes())
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug, Error)]
pub enum AdjudicationError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("engine '{0}' needs a precedent index")]
    MissingIndex(EngineKind),
    #[error("building the query graph: {0}")]
    QueryGraph(#[from] IngestError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("provider failed after {} call(s): {source}", transcript.len())]
    Provider {
        #[source]
        source: ProviderError,
        transcript: Vec<TranscriptEntry>,
    },
    #[error("no label in the {purpose:?} response after a retry: {excerpt:?}")]
    Unparseable {
        purpose: CallPurpose,
        excerpt: String,
        transcript: Vec<TranscriptEntry>,
    },
}

impl AdjudicationError {
    /// Calls made before the failure, when any were.
    pub fn transcript(&self) -> &[TranscriptEntry] {
        match self {
            AdjudicationError::Provider { transcript, .. } | AdjudicationError::Unparseable { transcript, .. } => transcript,
            _ => &[],
        }
    }
}

/// Response text with a trailing bare label line removed.
fn justification_of(response: &str) -> String {
    let trimmed = response.trim();
    match trimmed.rsplit_once('\n') {
        Some((body, last)) if OutcomeLabel::from_canonical(last.trim()).is_some() => body.trim().to_string(),
        None if OutcomeLabel::from_canonical(trimmed).is_some() => String::new(),
        _ => trimmed.to_string(),
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(120).collect()
}

fn render_precedents(precedents: &[Precedent]) -> String {
    if precedents.is_empty() {
        return "(none)".into();
    }
    precedents
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}", i + 1, p.rendered))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn render_trials(trials: &[CounterfactualTrial]) -> String {
    trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            format!(
                "[{}] {ALTERNATE_PREFIX} {}\nLABEL: {}\nJUSTIFICATION: {}\nRETRIEVED FOR THIS ACTION:\n{}",
                i + 1,
                t.proposed_action,
                t.trial_label,
                t.trial_justification,
                render_precedents(&t.retrievals)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

enum Proposal {
    Action(DrivingAction),
    Finalize,
}

fn is_finalize(response: &str) -> bool {
    response
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .any(|tok| tok == FINALIZE_TOKEN)
}

/// Reads a proposal: the last `ALTERNATE ACTION:` line wins; without one, a
/// `FINALIZE` token ends the loop; otherwise the last non-empty line is the
/// action.
fn parse_proposal(response: &str) -> Option<Proposal> {
    let lines: Vec<&str> = response.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if let Some(rest) = lines.iter().rev().find_map(|l| l.strip_prefix(ALTERNATE_PREFIX)) {
        return parse_action(rest).ok().map(Proposal::Action);
    }
    if is_finalize(response) {
        return Some(Proposal::Finalize);
    }
    lines.last().and_then(|l| parse_action(l).ok()).map(Proposal::Action)
}

/// Drives the engines over one chat provider.
pub struct Adjudicator<'a> {
    chat: &'a dyn ChatProvider,
    transformer: &'a dyn TextTransformer,
    embedder: &'a dyn EmbeddingProvider,
    index: Option<&'a PrecedentIndex>,
    templates: PromptTemplates,
}

struct Run {
    transcript: Vec<TranscriptEntry>,
}

impl Run {
    fn call(
        &mut self,
        chat: &dyn ChatProvider,
        purpose: CallPurpose,
        messages: Vec<ChatMessage>,
    ) -> Result<String, AdjudicationError> {
        match chat.complete(&messages) {
            Ok(response) => {
                self.transcript.push(TranscriptEntry {
                    purpose,
                    messages,
                    response: response.clone(),
                });
                Ok(response)
            }
            Err(source) => Err(AdjudicationError::Provider {
                source,
                transcript: std::mem::take(&mut self.transcript),
            }),
        }
    }

    /// Asks for a label, reprompting once if the answer carries none.
    fn labelled(
        &mut self,
        chat: &dyn ChatProvider,
        purposes: (CallPurpose, CallPurpose),
        messages: Vec<ChatMessage>,
        label_instruction: &str,
    ) -> Result<(OutcomeLabel, String), AdjudicationError> {
        let first = self.call(chat, purposes.0, messages.clone())?;
        if let Ok(label) = parse_outcome_label(&first) {
            return Ok((label, justification_of(&first)));
        }
        let mut retry = messages;
        retry.push(ChatMessage {
            role: Role::Assistant,
            content: first,
            image: None,
        });
        retry.push(ChatMessage::user(format!(
            "Your answer did not end with a label. {label_instruction}"
        )));
        let second = self.call(chat, purposes.1, retry)?;
        match parse_outcome_label(&second) {
            Ok(label) => Ok((label, justification_of(&second))),
            Err(_) => Err(AdjudicationError::Unparseable {
                purpose: purposes.0,
                excerpt: excerpt(&second),
                transcript: std::mem::take(&mut self.transcript),
            }),
        }
    }
}

impl<'a> Adjudicator<'a> {
    pub fn new(chat: &'a dyn ChatProvider, transformer: &'a dyn TextTransformer, embedder: &'a dyn EmbeddingProvider) -> Self {
        Adjudicator {
            chat,
            transformer,
            embedder,
            index: None,
            templates: PromptTemplates::default(),
        }
    }

    pub fn with_index(mut self, index: &'a PrecedentIndex) -> Self {
        self.index = Some(index);
        self
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    /// Extracts the scene graph, sets the ego-action node to the candidate
    /// and embeds it. Any outcome node is dropped.
    pub fn build_query_graph(&self, q: &SceneQuery) -> Result<SceneActionGraph, AdjudicationError> {
        q.validate()?;
        let source = Source::new("query", QUERY_GRAPH_ID, self.transformer.pipeline_version());
        let graph = extract_query_nodes(&q.scene_text(), QUERY_GRAPH_ID, source, self.transformer)?;
        Ok(self.with_action(&graph, &q.candidate_action)?)
    }

    fn with_action(&self, graph: &SceneActionGraph, action: &DrivingAction) -> Result<SceneActionGraph, IngestError> {
        let mut g = graph.clone();
        g.remove_type(NodeType::Outcome);
        g.remove_type(NodeType::EgoAction);
        let node = GraphNode::new(
            format!("{}/{}", g.graph_id, NodeType::EgoAction),
            NodeType::EgoAction,
            "ego action",
            action.canonical(),
        );
        let at = g.nodes.iter().position(|n| n.node_type > NodeType::EgoAction).unwrap_or(g.nodes.len());
        g.nodes.insert(at, node);
        embed_graph_nodes(&g, self.embedder)
    }

    fn retrieve(&self, graph: &SceneActionGraph, cfg: &EngineConfig) -> Result<Vec<Precedent>, AdjudicationError> {
        let index = self.index.ok_or(AdjudicationError::MissingIndex(cfg.kind))?;
        let weights = cfg.weights.unwrap_or_else(|| *index.weights());
        let results = index.retrieve_top_k(graph, cfg.k, &weights, cfg.kind.class_filter())?;
        Ok(results
            .into_iter()
            .map(|result| {
                let g = index.get(&result.graph_id).expect("retrieved id is in the index");
                let rendered = format!(
                    "{} {} (score {:.4})\n{}",
                    result.data_class.tag(),
                    result.graph_id,
                    result.score,
                    g.render_nodes()
                );
                Precedent { result, rendered }
            })
            .collect())
    }

    fn goal(&self, kind: EngineKind) -> String {
        match kind {
            EngineKind::Agentic => self.templates.agentic_goal.clone(),
            _ => self.templates.adjudicate_goal.clone(),
        }
    }

    fn scene_block(&self, q: &SceneQuery) -> String {
        let mut block = format!("SCENE:\n{}", q.scene_text());
        if q.image_ref.is_some() {
            block.push_str(if self.chat.supports_images() {
                "\nImage: attached"
            } else {
                "\nImage: unavailable"
            });
        }
        block
    }

    fn user_message(&self, q: &SceneQuery, blocks: Vec<String>) -> ChatMessage {
        let mut m = ChatMessage::user(blocks.join("\n\n"));
        if self.chat.supports_images() {
            m.image = q.image_ref.clone();
        }
        m
    }

    /// The verdict prompt for the original candidate.
    fn verdict_messages(
        &self,
        kind: EngineKind,
        q: &SceneQuery,
        retrievals: Option<&[Precedent]>,
        trials: &[CounterfactualTrial],
    ) -> Vec<ChatMessage> {
        let mut blocks = vec![self.scene_block(q)];
        if let Some(r) = retrievals {
            blocks.push(format!("RETRIEVED SCENARIOS:\n{}", render_precedents(r)));
        }
        if !trials.is_empty() {
            blocks.push(format!("EXPLORED ALTERNATIVES:\n{}", render_trials(trials)));
        }
        if retrievals.is_some() {
            blocks.push(self.templates.cot_instruction.clone());
        }
        blocks.push(format!("PROPOSED ACTION:\n{}", q.candidate_action));
        blocks.push(self.templates.label_instruction.clone());
        vec![ChatMessage::system(self.goal(kind)), self.user_message(q, blocks)]
    }

    fn finish(
        &self,
        cfg: &EngineConfig,
        q: &SceneQuery,
        retrievals: Vec<Precedent>,
        trials: Vec<CounterfactualTrial>,
        stop_reason: Option<StopReason>,
        mut run: Run,
    ) -> Result<AdjudicationEpisode, AdjudicationError> {
        let messages = self.verdict_messages(cfg.kind, q, cfg.kind.uses_retrieval().then_some(&retrievals[..]), &trials);
        let (verdict, justification) = run.labelled(
            self.chat,
            (CallPurpose::Verdict, CallPurpose::VerdictRetry),
            messages,
            &self.templates.label_instruction,
        )?;
        let mut episode = AdjudicationEpisode {
            episode_id: String::new(),
            engine_kind: cfg.kind,
            engine_fingerprint: cfg.fingerprint(&self.templates),
            query: q.clone(),
            iteration_count: trials.len(),
            retrievals,
            trials,
            verdict,
            justification,
            stop_reason,
            prompt_version: self.templates.version.clone(),
            embed_fingerprint: cfg.kind.uses_retrieval().then(|| self.embedder.fingerprint()),
            transcript: run.transcript,
        };
        episode.episode_id = episode_id(&episode);
        Ok(episode)
    }

    pub fn adjudicate(&self, q: &SceneQuery, cfg: &EngineConfig) -> Result<AdjudicationEpisode, AdjudicationError> {
        match cfg.kind {
            EngineKind::Base => self.adjudicate_base(q),
            EngineKind::Rag | EngineKind::RagPosOnly => self.adjudicate_rag(q, cfg),
            EngineKind::Agentic => self.adjudicate_agentic(q, cfg),
        }
    }

    /// One prompt, no precedents.
    pub fn adjudicate_base(&self, q: &SceneQuery) -> Result<AdjudicationEpisode, AdjudicationError> {
        q.validate()?;
        let cfg = EngineConfig::new(EngineKind::Base);
        self.finish(&cfg, q, Vec::new(), Vec::new(), None, Run { transcript: Vec::new() })
    }

    /// Top-k precedents plus a reasoning instruction, one prompt.
    pub fn adjudicate_rag(&self, q: &SceneQuery, cfg: &EngineConfig) -> Result<AdjudicationEpisode, AdjudicationError> {
        let graph = self.build_query_graph(q)?;
        let retrievals = self.retrieve(&graph, cfg)?;
        self.finish(cfg, q, retrievals, Vec::new(), None, Run { transcript: Vec::new() })
    }

    fn propose_messages(&self, q: &SceneQuery, initial: &[Precedent], trials: &[CounterfactualTrial]) -> Vec<ChatMessage> {
        let mut blocks = vec![
            self.scene_block(q),
            format!("RETRIEVED SCENARIOS:\n{}", render_precedents(initial)),
        ];
        if !trials.is_empty() {
            blocks.push(format!("EXPLORED ALTERNATIVES:\n{}", render_trials(trials)));
        }
        blocks.push(format!("PROPOSED ACTION:\n{}", q.candidate_action));
        blocks.push(self.templates.propose_instruction.clone());
        vec![ChatMessage::system(self.goal(EngineKind::Agentic)), self.user_message(q, blocks)]
    }

    fn is_repeat(q: &SceneQuery, trials: &[CounterfactualTrial], action: &DrivingAction) -> bool {
        action.same_as(&q.candidate_action) || trials.iter().any(|t| t.proposed_action.same_as(action))
    }

    /// Asks for a new alternative. A repeat of the candidate or an earlier
    /// trial is sent back once; a second repeat returns `Ok(None)` with
    /// [`StopReason::DuplicateProposal`].
    fn propose_counterfactual(
        &self,
        run: &mut Run,
        q: &SceneQuery,
        initial: &[Precedent],
        trials: &[CounterfactualTrial],
    ) -> Result<Result<DrivingAction, StopReason>, AdjudicationError> {
        let messages = self.propose_messages(q, initial, trials);
        let first = run.call(self.chat, CallPurpose::Propose, messages.clone())?;
        let rejected = match parse_proposal(&first) {
            Some(Proposal::Finalize) => return Ok(Err(StopReason::Finalized)),
            Some(Proposal::Action(a)) if !Self::is_repeat(q, trials, &a) => return Ok(Ok(a)),
            Some(Proposal::Action(a)) => format!("'{a}' repeats an action that was already considered."),
            None => "No alternative action was found in your answer.".to_string(),
        };
        let mut retry = messages;
        retry.push(ChatMessage {
            role: Role::Assistant,
            content: first,
            image: None,
        });
        retry.push(ChatMessage::user(format!(
            "{rejected} Propose a different action, on a final line of the form:\n{ALTERNATE_PREFIX} <action>"
        )));
        let second = run.call(self.chat, CallPurpose::ProposeRetry, retry)?;
        Ok(match parse_proposal(&second) {
            Some(Proposal::Finalize) => Err(StopReason::Finalized),
            Some(Proposal::Action(a)) if !Self::is_repeat(q, trials, &a) => Ok(a),
            _ => Err(StopReason::DuplicateProposal),
        })
    }

    fn evaluate_messages(
        &self,
        q: &SceneQuery,
        action: &DrivingAction,
        retrievals: &[Precedent],
        trials: &[CounterfactualTrial],
    ) -> Vec<ChatMessage> {
        let mut blocks = vec![
            self.scene_block(q),
            format!("RETRIEVED SCENARIOS:\n{}", render_precedents(retrievals)),
        ];
        if !trials.is_empty() {
            blocks.push(format!("EXPLORED ALTERNATIVES:\n{}", render_trials(trials)));
        }
        blocks.push(self.templates.cot_instruction.clone());
        blocks.push(format!("{ALTERNATE_PREFIX}\n{action}"));
        blocks.push(self.templates.evaluate_instruction.clone());
        vec![ChatMessage::system(self.goal(EngineKind::Agentic)), self.user_message(q, blocks)]
    }

    /// Explores up to `max_iterations` alternatives, then adjudicates the
    /// original candidate with every trial and retrieval in the prompt.
    /// The candidate's own retrievals are computed once and reused.
    pub fn adjudicate_agentic(&self, q: &SceneQuery, cfg: &EngineConfig) -> Result<AdjudicationEpisode, AdjudicationError> {
        let graph = self.build_query_graph(q)?;
        let initial = self.retrieve(&graph, cfg)?;
        let mut run = Run { transcript: Vec::new() };
        let mut trials: Vec<CounterfactualTrial> = Vec::new();
        let mut stop = StopReason::MaxIterations;
        while trials.len() < cfg.max_iterations {
            let action = match self.propose_counterfactual(&mut run, q, &initial, &trials)? {
                Ok(a) => a,
                Err(reason) => {
                    stop = reason;
                    break;
                }
            };
            let trial_graph = self.with_action(&graph, &action)?;
            let retrievals = self.retrieve(&trial_graph, cfg)?;
            let (label, justification) = run.labelled(
                self.chat,
                (CallPurpose::Evaluate, CallPurpose::EvaluateRetry),
                self.evaluate_messages(q, &action, &retrievals, &trials),
                &self.templates.evaluate_instruction,
            )?;
            trials.push(CounterfactualTrial {
                proposed_action: action,
                retrievals,
                trial_label: label,
                trial_justification: justification,
            });
        }
        self.finish(cfg, q, initial, trials, Some(stop), run)
    }
}

/// Content hash over engine, query and transcript.
fn episode_id(e: &AdjudicationEpisode) -> String {
    let mut h = Sha256::new();
    h.update(e.engine_fingerprint.as_bytes());
    h.update(b"\0");
    h.update(serde_json::to_vec(&e.query).expect("query serializes"));
    h.update(b"\0");
    h.update(serde_json::to_vec(&e.transcript).expect("transcript serializes"));
    let digest = h.finalize();
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("ep-{hex}")
}
