//! Provider wiring shared by the CLI and the HTTP server, so both surfaces
//! run an identical adjudication for identical inputs.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use precedent_core::adjudication::{AdjudicationEpisode, Adjudicator, StopReason};
use precedent_core::embedding::EmbeddingProviderConfig;
use precedent_core::graph::parse_action;
use precedent_core::ingestion::{ExtractionProviderConfig, TextTransformer};
use precedent_core::llm::{RemoteChat, ScriptedChat};
use precedent_core::prompts::PromptTemplates;
use precedent_core::{
    ChatMessage, ChatProvider, DataClass, EmbeddingProvider, EngineConfig, EngineKind, OutcomeLabel,
    PrecedentIndex, ProviderError, SceneMetadata, SceneQuery,
};

use crate::error::{ErrorCode, ServiceError};

/// Embedding dimension used when no index dictates one.
pub const DEFAULT_EMBED_DIM: usize = 64;

/// A scene as given on the command line or in a request body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneInput {
    pub description: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub metadata: SceneMetadata,
}

impl SceneInput {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ServiceError::invalid(format!("{}: {e}", path.display())))
    }
}

/// Engine settings plus the query, before validation.
#[derive(Debug, Clone)]
pub struct AdjudicationRequest {
    pub engine: String,
    pub scene: SceneInput,
    pub action: String,
    pub k: Option<usize>,
    pub max_iterations: Option<usize>,
}

/// Engine kind and knobs, checked.
pub fn engine_config(engine: &str, k: Option<usize>, max_iterations: Option<usize>) -> Result<EngineConfig, ServiceError> {
    let kind: EngineKind = engine.parse().map_err(|_| {
        let known: Vec<&str> = EngineKind::ALL.iter().map(|k| k.as_str()).collect();
        ServiceError::invalid(format!("unknown engine '{engine}', expected one of {}", known.join(", ")))
    })?;
    let mut cfg = EngineConfig::new(kind);
    if let Some(k) = k {
        if k == 0 {
            return Err(ServiceError::invalid("k must be positive"));
        }
        cfg = cfg.with_k(k);
    }
    if let Some(n) = max_iterations {
        cfg = cfg.with_max_iterations(n);
    }
    Ok(cfg)
}

impl AdjudicationRequest {
    pub fn resolve(&self) -> Result<(SceneQuery, EngineConfig), ServiceError> {
        let cfg = engine_config(&self.engine, self.k, self.max_iterations)?;
        let action = parse_action(&self.action).map_err(|e| ServiceError::invalid(e.to_string()))?;
        let query = SceneQuery {
            description: self.scene.description.clone(),
            image_ref: self.scene.image_ref.clone(),
            metadata: self.scene.metadata.clone(),
            candidate_action: action,
        };
        query.validate()?;
        Ok((query, cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub graph_id: String,
    pub data_class: DataClass,
    pub score: f64,
}

/// The part of an episode a caller usually wants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode_id: String,
    pub engine: EngineKind,
    pub action: String,
    pub verdict: OutcomeLabel,
    pub justification: String,
    pub citations: Vec<Citation>,
    pub iteration_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
}

impl EpisodeSummary {
    pub fn of(ep: &AdjudicationEpisode) -> Self {
        EpisodeSummary {
            episode_id: ep.episode_id.clone(),
            engine: ep.engine_kind,
            action: ep.query.candidate_action.canonical().to_string(),
            verdict: ep.verdict,
            justification: ep.justification.clone(),
            citations: ep
                .citations()
                .into_iter()
                .map(|(id, class, score)| Citation {
                    graph_id: id.to_string(),
                    data_class: class,
                    score,
                })
                .collect(),
            iteration_count: ep.iteration_count,
            stop_reason: ep.stop_reason,
        }
    }
}

/// Stands in when no chat model is configured; every call fails.
struct NoChat(String);

impl ChatProvider for NoChat {
    fn complete(&self, _messages: &[ChatMessage]) -> Result<String, ProviderError> {
        Err(ProviderError::Config(self.0.clone()))
    }
}

/// A scripted provider when `script` is given, else the remote provider
/// from the environment. With `lenient`, a missing remote configuration
/// yields a provider that fails each call instead of an error now.
pub fn chat_provider(script: Option<&Path>, lenient: bool) -> Result<Arc<dyn ChatProvider>, ServiceError> {
    if let Some(path) = script {
        return Ok(Arc::new(ScriptedChat::from_file(path)?));
    }
    match RemoteChat::from_env() {
        Ok(chat) => Ok(Arc::new(chat)),
        Err(e) if lenient => {
            tracing::warn!("no chat provider: {e}");
            Ok(Arc::new(NoChat(e.to_string())))
        }
        Err(e) => Err(ServiceError::new(ErrorCode::Config, e.to_string())),
    }
}

pub fn extraction(remote: bool) -> Result<Box<dyn TextTransformer>, ServiceError> {
    let cfg = if remote {
        ExtractionProviderConfig::remote_from_env()?
    } else {
        ExtractionProviderConfig::rule_based()
    };
    Ok(cfg.build()?)
}

pub fn embedding_config(remote: bool, dim: usize) -> Result<EmbeddingProviderConfig, ServiceError> {
    if remote {
        Ok(EmbeddingProviderConfig::remote_from_env()?)
    } else {
        Ok(EmbeddingProviderConfig::deterministic(dim))
    }
}

/// Everything an adjudication needs. Immutable once built and shared
/// across request threads.
pub struct Runtime {
    pub chat: Arc<dyn ChatProvider>,
    pub transformer: Box<dyn TextTransformer>,
    pub embedder: Box<dyn EmbeddingProvider>,
    pub index: Option<PrecedentIndex>,
    pub templates: PromptTemplates,
}

impl Runtime {
    /// Uses the index's own embedding configuration when there is an index,
    /// so queries are embedded the way the corpus was.
    pub fn new(
        chat: Arc<dyn ChatProvider>,
        transformer: Box<dyn TextTransformer>,
        index: Option<PrecedentIndex>,
        templates: PromptTemplates,
    ) -> Result<Self, ServiceError> {
        let embed_cfg = match &index {
            Some(ix) => ix.manifest().embed_config.clone(),
            None => EmbeddingProviderConfig::deterministic(DEFAULT_EMBED_DIM),
        };
        let embedder = embed_cfg.build()?;
        if let Some(ix) = &index {
            if embedder.fingerprint() != ix.fingerprint() {
                return Err(ServiceError::new(
                    ErrorCode::Index,
                    format!(
                        "index was built with '{}' but its configuration now gives '{}'",
                        ix.fingerprint(),
                        embedder.fingerprint()
                    ),
                ));
            }
        }
        Ok(Runtime {
            chat,
            transformer,
            embedder,
            index,
            templates,
        })
    }

    pub fn adjudicator(&self) -> Adjudicator<'_> {
        let a = Adjudicator::new(self.chat.as_ref(), self.transformer.as_ref(), self.embedder.as_ref())
            .with_templates(self.templates.clone());
        match &self.index {
            Some(ix) => a.with_index(ix),
            None => a,
        }
    }

    pub fn adjudicate(&self, req: &AdjudicationRequest) -> Result<AdjudicationEpisode, ServiceError> {
        let (query, cfg) = req.resolve()?;
        Ok(self.adjudicator().adjudicate(&query, &cfg)?)
    }
}

pub fn load_templates(dir: Option<&Path>) -> Result<PromptTemplates, ServiceError> {
    match dir {
        Some(d) => PromptTemplates::load_dir(d).map_err(|e| ServiceError::new(ErrorCode::Config, format!("{}: {e}", d.display()))),
        None => Ok(PromptTemplates::default()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(engine: &str, action: &str) -> AdjudicationRequest {
        AdjudicationRequest {
            engine: engine.into(),
            scene: SceneInput {
                description: "Ego vehicle drives on a two-lane road.".into(),
                image_ref: None,
                metadata: SceneMetadata::default(),
            },
            action: action.into(),
            k: None,
            max_iterations: None,
        }
    }

    #[test]
    fn unknown_engine_lists_the_known_ones() {
        let err = request("oracle", "STOP").resolve().unwrap_err();
        assert_eq!(err.code, ErrorCode::InvalidInput);
        assert!(err.message.contains("rag-pos-only"));
    }

    #[test]
    fn zero_k_and_blank_action_are_invalid() {
        let mut r = request("rag", "STOP");
        r.k = Some(0);
        assert_eq!(r.resolve().unwrap_err().code, ErrorCode::InvalidInput);
        assert_eq!(request("rag", "  ").resolve().unwrap_err().code, ErrorCode::InvalidInput);
    }

    #[test]
    fn action_phrases_are_canonicalized() {
        let (q, cfg) = request("agentic", "nudge  left").resolve().unwrap();
        assert_eq!(q.candidate_action.canonical(), "NUDGE LEFT");
        assert_eq!(cfg.kind, EngineKind::Agentic);
    }

    #[test]
    fn missing_remote_chat_fails_per_call_when_lenient() {
        if std::env::var("LLM_ENDPOINT").is_ok() {
            return;
        }
        let chat = chat_provider(None, true).unwrap();
        assert!(matches!(chat.complete(&[]), Err(ProviderError::Config(_))));
        assert_eq!(chat_provider(None, false).err().unwrap().code, ErrorCode::Config);
    }
}
