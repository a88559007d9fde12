//! Text embedding providers and vector math.
//!
//! Every vector handed to the rest of the system is L2-normalized, so
//! similarity between stored vectors is a plain dot product. Two providers
//! exist: an HTTP client for an embeddings endpoint and a deterministic
//! token-hashing embedder used for offline tests.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed deviation of a normalized vector's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Default dimension of the deterministic test embedder.
pub const DEFAULT_TEST_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text has no alphanumeric tokens: {0:?}")]
    NoTokens(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("embedding provider failed (status {status:?}): {message}")]
    Provider { status: Option<u16>, message: String },
}

/// A dense embedding. Serialized as a bare array of numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOLERANCE
    }

    /// Unit-length copy of this vector.
    pub fn normalized(&self) -> Result<EmbeddingVector, EmbeddingError> {
        let norm = self.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(EmbeddingVector::new(self.values.iter().map(|x| x / norm).collect()))
    }

    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64, EmbeddingError> {
        check_dims(self, other)?;
        Ok(dot(&self.values, &other.values))
    }
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<(), EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, exactly symmetric in its arguments.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    // elementwise products and the norm product are both commutative, so the
    // result does not depend on argument order
    Ok((dot(&a.values, &b.values) / (na * nb)).clamp(-1.0, 1.0))
}

/// Source of raw text embeddings.
pub trait EmbeddingProvider: Send + Sync {
    /// Declared output dimension.
    fn dim(&self) -> usize;

    /// Identifies the provider and model; vectors from different
    /// fingerprints are never compared.
    fn fingerprint(&self) -> String;

    /// Raw vectors, one per input, in order. Callers normalize.
    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError>;
}

/// Embeds one text and returns a unit-length vector of the provider's dim.
pub fn embed_text(text: &str, provider: &dyn EmbeddingProvider) -> Result<EmbeddingVector, EmbeddingError> {
    Ok(embed_texts(&[text], provider)?.remove(0))
}

/// Batch form of [`embed_text`].
pub fn embed_texts(texts: &[&str], provider: &dyn EmbeddingProvider) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    if texts.iter().any(|t| t.trim().is_empty()) {
        return Err(EmbeddingError::EmptyText);
    }
    let raw = provider.embed_raw(texts)?;
    if raw.len() != texts.len() {
        return Err(EmbeddingError::Provider {
            status: None,
            message: format!("expected {} vectors, got {}", texts.len(), raw.len()),
        });
    }
    raw.into_iter()
        .map(|values| {
            if values.len() != provider.dim() {
                return Err(EmbeddingError::DimMismatch {
                    expected: provider.dim(),
                    actual: values.len(),
                });
            }
            EmbeddingVector::new(values).normalized()
        })
        .collect()
}

/// Deterministic token-hashing embedder.
///
/// Text is split on non-alphanumeric characters and lower-cased; each token
/// is hashed (64-bit FNV-1a over a fixed seed) into one of `dim` buckets and
/// counted. Texts sharing tokens therefore have positive cosine.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

const HASH_SEED: &[u8] = b"precedent-hash-embedder/v1";

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::Config("dim must be positive".into()));
        }
        Ok(HashEmbedder { dim })
    }

    fn bucket(&self, token: &str) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in HASH_SEED.iter().chain(token.as_bytes()) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % self.dim as u64) as usize
    }

    fn embed_one(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut counts = vec![0.0; self.dim];
        let mut any = false;
        for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            counts[self.bucket(&token.to_lowercase())] += 1.0;
            any = true;
        }
        if !any {
            return Err(EmbeddingError::NoTokens(text.to_string()));
        }
        Ok(counts)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("deterministic-test:fnv1a-token-hash:{}", self.dim)
    }

    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Remote,
    DeterministicTest,
}

/// Embedding provider configuration. Credentials are never stored here; the
/// remote provider reads `EMBED_API_KEY` when built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub provider_kind: ProviderKind,
    pub model_name: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub dim: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

fn default_timeout_secs() -> u64 {
    30
}

fn default_max_retries() -> u32 {
    2
}

impl EmbeddingProviderConfig {
    pub fn deterministic(dim: usize) -> Self {
        EmbeddingProviderConfig {
            provider_kind: ProviderKind::DeterministicTest,
            model_name: "fnv1a-token-hash".into(),
            endpoint: None,
            dim,
            timeout_secs: default_timeout_secs(),
            max_retries: 0,
        }
    }

    /// Remote config from `EMBED_ENDPOINT`, `EMBED_MODEL` and `EMBED_DIM`.
    pub fn remote_from_env() -> Result<Self, EmbeddingError> {
        let endpoint = std::env::var("EMBED_ENDPOINT")
            .map_err(|_| EmbeddingError::Config("EMBED_ENDPOINT is not set".into()))?;
        let dim = match std::env::var("EMBED_DIM") {
            Ok(d) => d
                .parse()
                .map_err(|_| EmbeddingError::Config(format!("EMBED_DIM is not an integer: {d}")))?,
            Err(_) => return Err(EmbeddingError::Config("EMBED_DIM is not set".into())),
        };
        Ok(EmbeddingProviderConfig {
            provider_kind: ProviderKind::Remote,
            model_name: std::env::var("EMBED_MODEL").unwrap_or_else(|_| "default".into()),
            endpoint: Some(endpoint),
            dim,
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
        })
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dim == 0 {
            return Err(EmbeddingError::Config("dim must be positive".into()));
        }
        if self.provider_kind == ProviderKind::Remote
            && self.endpoint.as_deref().is_none_or(|e| e.trim().is_empty())
        {
            return Err(EmbeddingError::Config("remote provider requires an endpoint".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>, EmbeddingError> {
        self.validate()?;
        match self.provider_kind {
            ProviderKind::DeterministicTest => Ok(Box::new(HashEmbedder::new(self.dim)?)),
            ProviderKind::Remote => Ok(Box::new(RemoteEmbedder::new(self.clone())?)),
        }
    }
}

/// Client for an embeddings endpoint accepting `{model, input:[..]}` and
/// answering `{data:[{embedding:[..]}]}`.
pub struct RemoteEmbedder {
    config: EmbeddingProviderConfig,
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(config: EmbeddingProviderConfig) -> Result<Self, EmbeddingError> {
        config.validate()?;
        let endpoint = config.endpoint.clone().unwrap_or_default();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(RemoteEmbedder {
            config,
            endpoint,
            api_key: std::env::var("EMBED_API_KEY").ok(),
            agent,
        })
    }

    fn call_once(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = EmbedRequest {
            model: &self.config.model_name,
            input: texts,
        };
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => EmbeddingError::Provider {
                status: Some(code),
                message: format!("endpoint returned HTTP {code}"),
            },
            other => EmbeddingError::Provider {
                status: None,
                message: other.to_string(),
            },
        })?;
        let parsed: EmbedResponse = resp.body_mut().read_json().map_err(|e| EmbeddingError::Provider {
            status: None,
            message: format!("malformed response: {e}"),
        })?;
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn fingerprint(&self) -> String {
        format!("remote:{}:{}", self.config.model_name, self.config.dim)
    }

    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut attempt = 0;
        loop {
            match self.call_once(texts) {
                Ok(v) => return Ok(v),
                Err(EmbeddingError::Provider { status, .. })
                    if attempt < self.config.max_retries && retryable(status) =>
                {
                    std::thread::sleep(Duration::from_millis(200 << attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

pub(crate) fn retryable(status: Option<u16>) -> bool {
    match status {
        None => true,
        Some(code) => code == 429 || code >= 500,
    }
}
