//! Type-partitioned graph similarity and exact top-k precedent retrieval.
//!
//! Similarity between a query graph and a corpus graph is a weighted sum over
//! node types. For each type present in both graphs the contribution is the
//! type weight times the best cosine between any query node and any corpus
//! node of that type; a type missing from either side contributes nothing.
//! Retrieval is an exhaustive scan: corpora here are a few thousand graphs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingProvider, EmbeddingProviderConfig};
use crate::fsutil::atomic_write;
use crate::graph::{read_corpus, validate_graph, write_corpus, DataClass, GraphError, NodeType, SceneActionGraph};
use crate::ingestion::embed_graph_nodes;

/// Tolerance on the weight simplex constraint.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Default number of precedents retrieved per query.
pub const DEFAULT_K: usize = 3;

const MANIFEST_FILE: &str = "manifest.json";
const CORPUS_FILE: &str = "corpus.jsonl";
const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("invalid type weights: {0}")]
    Weights(String),
    #[error("k must be positive")]
    ZeroK,
    #[error("embedding fingerprint mismatch: {left:?} vs {right:?}")]
    FingerprintMismatch { left: Option<String>, right: Option<String> },
    #[error("graph '{graph_id}' node {node_type} has no embedding")]
    Unembedded { graph_id: String, node_type: NodeType },
    #[error("graphs failed validation: {0:?}")]
    Validation(Vec<String>),
    #[error("duplicate graph_id '{0}'")]
    DuplicateId(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Nonnegative per-type weights summing to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypeWeights([f64; 6]);

impl TypeWeights {
    pub fn new(weights: [f64; 6]) -> Result<Self, IndexError> {
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(IndexError::Weights(format!("weight {w} is negative or not finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(IndexError::Weights(format!("weights sum to {sum}, expected 1")));
        }
        Ok(TypeWeights(weights))
    }

    pub fn uniform() -> Self {
        TypeWeights([1.0 / 6.0; 6])
    }

    /// All mass on one type.
    pub fn single(node_type: NodeType) -> Self {
        let mut w = [0.0; 6];
        w[node_type.index()] = 1.0;
        TypeWeights(w)
    }

    /// Builds weights from a partial map; unlisted types get zero.
    pub fn from_map(map: &BTreeMap<NodeType, f64>) -> Result<Self, IndexError> {
        let mut w = [0.0; 6];
        for (t, v) in map {
            w[t.index()] = *v;
        }
        TypeWeights::new(w)
    }

    pub fn get(&self, node_type: NodeType) -> f64 {
        self.0[node_type.index()]
    }

    pub fn to_map(&self) -> BTreeMap<NodeType, f64> {
        NodeType::ALL.into_iter().map(|t| (t, self.get(t))).collect()
    }
}

impl Default for TypeWeights {
    fn default() -> Self {
        TypeWeights::uniform()
    }
}

/// Parses `EGO=0.5,MAP=0.5` style specs.
impl FromStr for TypeWeights {
    type Err = IndexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut map = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| IndexError::Weights(format!("expected TYPE=weight, got '{part}'")))?;
            let t: NodeType = k.trim().parse()?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| IndexError::Weights(format!("not a number: '{}'", v.trim())))?;
            if map.insert(t, v).is_some() {
                return Err(IndexError::Weights(format!("{t} listed twice")));
            }
        }
        TypeWeights::from_map(&map)
    }
}

impl Serialize for TypeWeights {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_map().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TypeWeights {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<NodeType, f64>::deserialize(deserializer)?;
        TypeWeights::from_map(&map).map_err(serde::de::Error::custom)
    }
}

/// Scoring options beyond the weights themselves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Rescale contributions by the total weight of the types both graphs
    /// share. Off by default: missing types simply contribute zero.
    #[serde(default)]
    pub renormalize_missing: bool,
}

/// Restricts the retrieval pool by data class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassFilter {
    #[default]
    All,
    Positive,
    Negative,
}

impl ClassFilter {
    pub fn admits(self, class: DataClass) -> bool {
        match self {
            ClassFilter::All => true,
            ClassFilter::Positive => class == DataClass::Positive,
            ClassFilter::Negative => class == DataClass::Negative,
        }
    }
}

impl FromStr for ClassFilter {
    type Err = IndexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(ClassFilter::All),
            "positive" => Ok(ClassFilter::Positive),
            "negative" => Ok(ClassFilter::Negative),
            other => Err(IndexError::Manifest(format!("unknown class filter '{other}'"))),
        }
    }
}

impl fmt::Display for ClassFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassFilter::All => "all",
            ClassFilter::Positive => "positive",
            ClassFilter::Negative => "negative",
        })
    }
}

/// One scored corpus graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub graph_id: String,
    pub score: f64,
    /// Weighted contribution of every type both graphs share.
    pub per_type_contributions: BTreeMap<NodeType, f64>,
    pub data_class: DataClass,
}

/// Scores `candidate` against `query`.
///
/// Both graphs must be fully embedded under the same provider fingerprint.
/// Several nodes of one type are handled by taking the best pair.
pub fn score_pair(
    query: &SceneActionGraph,
    candidate: &SceneActionGraph,
    weights: &TypeWeights,
    options: ScoreOptions,
) -> Result<RetrievalResult, IndexError> {
    let (qf, cf) = (&query.source.embed_fingerprint, &candidate.source.embed_fingerprint);
    if qf.is_none() || qf != cf {
        return Err(IndexError::FingerprintMismatch {
            left: qf.clone(),
            right: cf.clone(),
        });
    }
    for g in [query, candidate] {
        if let Some(n) = g.nodes.iter().find(|n| n.embedding.is_none()) {
            return Err(IndexError::Unembedded {
                graph_id: g.graph_id.clone(),
                node_type: n.node_type,
            });
        }
    }

    let mut contributions = BTreeMap::new();
    for t in NodeType::ALL {
        let mut best: Option<f64> = None;
        for q in query.nodes_of(t) {
            for c in candidate.nodes_of(t) {
                let (qe, ce) = (q.embedding.as_ref(), c.embedding.as_ref());
                let sim = cosine_similarity(qe.expect("checked"), ce.expect("checked"))?;
                best = Some(best.map_or(sim, |b| b.max(sim)));
            }
        }
        if let Some(sim) = best {
            contributions.insert(t, weights.get(t) * sim);
        }
    }

    if options.renormalize_missing {
        let shared: f64 = contributions.keys().map(|t| weights.get(*t)).sum();
        if shared > 0.0 {
            for v in contributions.values_mut() {
                *v /= shared;
            }
        }
    }

    Ok(RetrievalResult {
        graph_id: candidate.graph_id.clone(),
        score: contributions.values().sum(),
        per_type_contributions: contributions,
        data_class: candidate.data_class,
    })
}

/// Descending score, then ascending graph id.
fn rank_order(a: &RetrievalResult, b: &RetrievalResult) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.graph_id.cmp(&b.graph_id))
}

/// Contents of the sidecar manifest written next to a persisted corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub manifest_version: String,
    pub weights: TypeWeights,
    pub embed_fingerprint: String,
    pub embed_config: EmbeddingProviderConfig,
    pub built_at: String,
    pub count: usize,
    pub k_default: usize,
    #[serde(default)]
    pub score_options: ScoreOptions,
}

/// Immutable retrieval corpus. Safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecedentIndex {
    graphs: Vec<SceneActionGraph>,
    positions: HashMap<String, usize>,
    manifest: IndexManifest,
}

impl PrecedentIndex {
    /// Validates and embeds `records` into an index.
    ///
    /// Nodes without a vector are embedded with `provider`. Graphs carrying
    /// vectors from another provider, or vectors of unknown provenance, are
    /// rejected.
    pub fn build(
        records: Vec<SceneActionGraph>,
        weights: TypeWeights,
        embed_config: &EmbeddingProviderConfig,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self, IndexError> {
        let fingerprint = provider.fingerprint();
        let invalid: Vec<String> = records
            .iter()
            .filter(|g| !validate_graph(g).is_empty())
            .map(|g| g.graph_id.clone())
            .collect();
        if !invalid.is_empty() {
            return Err(IndexError::Validation(invalid));
        }

        let mut graphs = Vec::with_capacity(records.len());
        for mut g in records {
            let has_vectors = g.nodes.iter().any(|n| n.embedding.is_some());
            match &g.source.embed_fingerprint {
                Some(f) if *f != fingerprint => {
                    return Err(IndexError::FingerprintMismatch {
                        left: Some(fingerprint),
                        right: Some(f.clone()),
                    })
                }
                None if has_vectors => {
                    return Err(IndexError::FingerprintMismatch {
                        left: Some(fingerprint),
                        right: None,
                    })
                }
                _ => {}
            }
            if !g.is_fully_embedded() || g.source.embed_fingerprint.is_none() {
                g = embed_graph_nodes(&g, provider)
                    .map_err(|e| IndexError::Manifest(format!("embedding '{}': {e}", g.graph_id)))?;
            }
            graphs.push(g);
        }

        let manifest = IndexManifest {
            manifest_version: MANIFEST_VERSION.into(),
            weights,
            embed_fingerprint: fingerprint,
            embed_config: embed_config.clone(),
            built_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            count: graphs.len(),
            k_default: DEFAULT_K,
            score_options: ScoreOptions::default(),
        };
        Self::assemble(graphs, manifest)
    }

    fn assemble(graphs: Vec<SceneActionGraph>, manifest: IndexManifest) -> Result<Self, IndexError> {
        let mut positions = HashMap::with_capacity(graphs.len());
        for (i, g) in graphs.iter().enumerate() {
            if positions.insert(g.graph_id.clone(), i).is_some() {
                return Err(IndexError::DuplicateId(g.graph_id.clone()));
            }
        }
        Ok(PrecedentIndex {
            graphs,
            positions,
            manifest,
        })
    }

    pub fn with_k_default(mut self, k: usize) -> Result<Self, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        self.manifest.k_default = k;
        Ok(self)
    }

    pub fn with_score_options(mut self, options: ScoreOptions) -> Self {
        self.manifest.score_options = options;
        self
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn graphs(&self) -> &[SceneActionGraph] {
        &self.graphs
    }

    pub fn get(&self, graph_id: &str) -> Option<&SceneActionGraph> {
        self.positions.get(graph_id).map(|&i| &self.graphs[i])
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn weights(&self) -> &TypeWeights {
        &self.manifest.weights
    }

    pub fn fingerprint(&self) -> &str {
        &self.manifest.embed_fingerprint
    }

    pub fn k_default(&self) -> usize {
        self.manifest.k_default
    }

    /// Exact top-k under the given weights.
    ///
    /// Results are ordered by descending score with ties broken by ascending
    /// graph id. A corpus graph sharing the query's id is never returned.
    pub fn retrieve_top_k(
        &self,
        query: &SceneActionGraph,
        k: usize,
        weights: &TypeWeights,
        filter: ClassFilter,
    ) -> Result<Vec<RetrievalResult>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.source.embed_fingerprint.as_deref() != Some(self.fingerprint()) {
            return Err(IndexError::FingerprintMismatch {
                left: Some(self.fingerprint().to_string()),
                right: query.source.embed_fingerprint.clone(),
            });
        }
        let mut scored = self
            .graphs
            .iter()
            .filter(|g| filter.admits(g.data_class) && g.graph_id != query.graph_id)
            .map(|g| score_pair(query, g, weights, self.manifest.score_options))
            .collect::<Result<Vec<_>, _>>()?;
        scored.sort_by(rank_order);
        scored.truncate(k);
        Ok(scored)
    }

    /// Writes `corpus.jsonl` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        std::fs::create_dir_all(dir)?;
        write_corpus(&dir.join(CORPUS_FILE), &self.graphs)?;
        let manifest = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| IndexError::Manifest(e.to_string()))?;
        atomic_write(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
        Ok(())
    }

    /// Reloads an index written by [`PrecedentIndex::save`]. No embedding
    /// calls are made; every stored vector must match the manifest.
    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: IndexManifest =
            serde_json::from_str(&text).map_err(|e| IndexError::Manifest(e.to_string()))?;
        if manifest.manifest_version != MANIFEST_VERSION {
            return Err(IndexError::Manifest(format!(
                "unsupported manifest_version '{}'",
                manifest.manifest_version
            )));
        }
        let graphs = read_corpus(&dir.join(CORPUS_FILE))?;
        if graphs.len() != manifest.count {
            return Err(IndexError::Manifest(format!(
                "manifest lists {} graphs, corpus has {}",
                manifest.count,
                graphs.len()
            )));
        }
        for g in &graphs {
            if g.source.embed_fingerprint.as_deref() != Some(manifest.embed_fingerprint.as_str()) {
                return Err(IndexError::FingerprintMismatch {
                    left: Some(manifest.embed_fingerprint.clone()),
                    right: g.source.embed_fingerprint.clone(),
                });
            }
            if let Some(n) = g.nodes.iter().find(|n| n.embedding.is_none()) {
                return Err(IndexError::Unembedded {
                    graph_id: g.graph_id.clone(),
                    node_type: n.node_type,
                });
            }
        }
        Self::assemble(graphs, manifest)
    }
}
