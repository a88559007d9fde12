//! Precedent-grounded adjudication of driving actions.
//!
//! Positive driving logs and negative crash narratives are normalized into a
//! single corpus of typed scene-action graphs. Candidate ego actions are then
//! labelled `UNSAFE`, `SAFE` or `REASONABLE` by one of three engines: a plain
//! chat model, a one-step retrieval-augmented prompt, or an agentic loop that
//! explores counterfactual actions before committing to a verdict.
//!
//! Module map:
//!
//! - [`graph`]: the scene-action graph model, action/label vocabularies,
//!   validation and the line-oriented corpus record format.
//! - [`embedding`]: embedding providers and vector math.
//! - [`index`]: type-weighted graph similarity and exact top-k retrieval.
//! - [`ingestion`]: crash-report and driving-log pipelines.
//! - [`llm`]: chat-completion providers (remote, scripted, replay).
//! - [`adjudication`]: the three reasoning engines.
//! - [`evaluation`]: benchmark loading, runs and recall/confusion reports.

#![forbid(unsafe_code)]

pub mod adjudication;
pub mod embedding;
pub mod evaluation;
pub mod graph;
pub mod index;
pub mod ingestion;
pub mod llm;
pub mod prompts;

mod fsutil;

pub use adjudication::{
    AdjudicationEpisode, AdjudicationError, Adjudicator, CounterfactualTrial, EngineConfig,
    EngineKind, SceneMetadata, SceneQuery,
};
pub use embedding::{
    cosine_similarity, EmbeddingError, EmbeddingProvider, EmbeddingProviderConfig, EmbeddingVector,
    HashEmbedder, ProviderKind,
};
pub use evaluation::{BenchmarkRecord, EvaluationReport, ReportDelta};
pub use graph::{
    DataClass, DrivingAction, GraphNode, NodeType, OutcomeLabel, SceneActionGraph, Source,
    Violation,
};
pub use index::{ClassFilter, PrecedentIndex, RetrievalResult, TypeWeights};
pub use llm::{ChatMessage, ChatProvider, ProviderError, Role};
